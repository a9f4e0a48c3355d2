//! Inception Score over pluggable class-probability vectors.

use crate::error::bail_arg;
use crate::{Result, Scalar};

pub const DEFAULT_IS_SPLITS: usize = 10;

const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Mean and population std of `exp(E_x KL(p(y|x) ‖ p(y)))` over contiguous
/// splits. Split `k` covers rows `[k·n/s, (k+1)·n/s)`.
pub fn inception_score<T: Scalar>(probs: &[Vec<T>], splits: usize) -> Result<(T, T)> {
    let n = probs.len();
    if n == 0 {
        bail_arg!("no probability rows");
    }
    if splits == 0 || splits > n {
        bail_arg!("splits must be in 1..={n}, got {splits}");
    }
    let c = probs[0].len();
    if c == 0 {
        bail_arg!("probability rows are empty");
    }
    for (i, row) in probs.iter().enumerate() {
        if row.len() != c {
            bail_arg!("row {i} has {} classes, expected {c}", row.len());
        }
        if row.iter().any(|&p| !(p >= T::zero()) || !p.is_finite()) {
            bail_arg!("row {i} has a negative or non-finite entry");
        }
        let s: T = row.iter().copied().sum();
        if (s - T::one()).abs().as_f64() > ROW_SUM_TOLERANCE {
            bail_arg!("row {i} sums to {s}, not 1");
        }
    }
    let mut scores = Vec::with_capacity(splits);
    for k in 0..splits {
        let part = &probs[k * n / splits..(k + 1) * n / splits];
        let m = T::count(part.len());
        let mut marginal = vec![T::zero(); c];
        for row in part {
            for (q, &p) in marginal.iter_mut().zip(row) {
                *q += p;
            }
        }
        marginal.iter_mut().for_each(|q| *q /= m);
        let mut kl = T::zero();
        for row in part {
            for (&p, &q) in row.iter().zip(&marginal) {
                if p > T::zero() {
                    kl += p * (p / q).ln();
                }
            }
        }
        scores.push((kl / m).exp());
    }
    let s = T::count(splits);
    let mean: T = scores.iter().copied().sum::<T>() / s;
    let var: T = scores.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / s;
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn uniform_rows_score_one() {
        let rows = vec![vec![0.1f64; 10]; 50];
        let (m, s) = inception_score(&rows, 5).unwrap();
        assert!((m - 1.0).abs() < 1e-12 && s.abs() < 1e-12);
    }

    #[test]
    fn balanced_one_hot_scores_class_count() {
        let rows: Vec<Vec<f64>> = (0..100).map(|i| (0..10).map(|c| if c == i % 10 { 1.0 } else { 0.0 }).collect()).collect();
        let (m, s) = inception_score(&rows, DEFAULT_IS_SPLITS).unwrap();
        assert!((m - 10.0).abs() < 1e-9, "{m}");
        assert!(s.abs() < 1e-9);
    }

    #[test]
    fn one_split_is_whole_set() {
        let rows = vec![vec![0.7f64, 0.3], vec![0.2, 0.8], vec![0.5, 0.5]];
        let (m, s) = inception_score(&rows, 1).unwrap();
        assert_eq!(s, 0.0);
        let q = [(0.7 + 0.2 + 0.5) / 3.0, (0.3 + 0.8 + 0.5) / 3.0];
        let kl: f64 = rows.iter().map(|r| r.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum::<f64>()).sum::<f64>() / 3.0;
        assert!((m - kl.exp()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(inception_score(&[vec![0.5f64, 0.4]], 1).is_err());
        assert!(inception_score(&[vec![1.5f64, -0.5]], 1).is_err());
        assert!(inception_score(&[vec![1.0f64]], 2).is_err());
        assert!(inception_score::<f64>(&[], 1).is_err());
    }

    proptest! {
        #[test]
        fn at_least_one_and_at_most_classes(seed in 0u64..5000, n in 2usize..40, c in 2usize..8) {
            let mut rng = rng_from_seed(seed);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let r: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0f64).powi(4)).collect();
                    let s: f64 = r.iter().sum::<f64>() + 1e-300;
                    r.iter().map(|x| x / s).collect()
                })
                .filter(|r: &Vec<f64>| (r.iter().sum::<f64>() - 1.0).abs() < 1e-9)
                .collect();
            prop_assume!(rows.len() >= 2);
            let (m, _) = inception_score(&rows, 2).unwrap();
            prop_assert!(m >= 1.0 - 1e-12 && m <= c as f64 + 1e-9);
        }
    }
}
