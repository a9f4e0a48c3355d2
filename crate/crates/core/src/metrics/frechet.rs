//! Gaussian feature fits and the Fréchet distance between them (FID).

use serde::{Deserialize, Serialize};

use super::linalg::{matmul, psd_sqrt, symmetric_eigen, symmetrize};
use crate::error::bail_arg;
use crate::{Result, Scalar};

/// Sample mean and unbiased (n − 1) covariance of a feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit<T> {
    pub mean: Vec<T>,
    /// Row-major `dim × dim`.
    pub cov: Vec<T>,
    pub n: usize,
}

impl<T: Scalar> GaussianFit<T> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Builds a fit directly from moments, e.g. for closed-form checks.
    pub fn from_moments(mean: Vec<T>, cov: Vec<T>, n: usize) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            bail_arg!("covariance has {} entries, expected {}", cov.len(), d * d);
        }
        Ok(Self { mean, cov, n })
    }
}

pub fn fit_gaussian<T: Scalar>(features: &[Vec<T>]) -> Result<GaussianFit<T>> {
    let n = features.len();
    if n < 2 {
        bail_arg!("a Gaussian fit needs at least 2 samples, got {n}");
    }
    let d = features[0].len();
    if d == 0 {
        bail_arg!("feature vectors are empty");
    }
    if let Some(bad) = features.iter().position(|f| f.len() != d) {
        bail_arg!("feature {bad} has dimension {}, expected {d}", features[bad].len());
    }
    let nf = T::count(n);
    let mut mean = vec![T::zero(); d];
    for f in features {
        for (m, &x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut cov = vec![T::zero(); d * d];
    let mut centred = vec![T::zero(); d];
    for f in features {
        for ((c, &x), &m) in centred.iter_mut().zip(f).zip(&mean) {
            *c = x - m;
        }
        for i in 0..d {
            let ci = centred[i];
            for j in i..d {
                cov[i * d + j] += ci * centred[j];
            }
        }
    }
    let denom = T::count(n - 1);
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok(GaussianFit { mean, cov, n })
}

/// `|μa − μb|² + Tr(Σa + Σb − 2 (Σa^½ Σb Σa^½)^½)`.
pub fn frechet_distance<T: Scalar>(a: &GaussianFit<T>, b: &GaussianFit<T>) -> Result<T> {
    let d = a.dim();
    if b.dim() != d {
        bail_arg!("fit dimensions differ: {d} vs {}", b.dim());
    }
    if a.cov.len() != d * d || b.cov.len() != d * d {
        bail_arg!("covariance shape does not match mean dimension");
    }
    let mean_term: T = a.mean.iter().zip(&b.mean).map(|(&x, &y)| (x - y) * (x - y)).sum();
    let trace = |m: &[T]| (0..d).map(|i| m[i * d + i]).sum::<T>();
    let root_a = psd_sqrt(&a.cov, d);
    let mut inner = matmul(&matmul(&root_a, &b.cov, d), &root_a, d);
    symmetrize(&mut inner, d);
    let (vals, _) = symmetric_eigen(&inner, d);
    // These are squares of covariance-scale eigenvalues, so an absolute floor
    // would drop real mass; only negative rounding noise is cut.
    let cross: T = vals.into_iter().map(|l| l.max(T::zero()).sqrt()).sum();
    let fid = mean_term + trace(&a.cov) + trace(&b.cov) - T::lit(2.0) * cross;
    if !fid.is_finite() {
        return Err(crate::Error::Numeric("Fréchet distance is not finite".into()));
    }
    Ok(fid.max(T::zero()))
}

/// Fits both feature sets and returns their Fréchet distance.
pub fn fid_from_features<T: Scalar>(a: &[Vec<T>], b: &[Vec<T>]) -> Result<T> {
    frechet_distance(&fit_gaussian(a)?, &fit_gaussian(b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, rng_from_seed};
    use proptest::prelude::*;

    fn eye(d: usize, s: f64) -> Vec<f64> {
        (0..d * d).map(|i| if i % (d + 1) == 0 { s } else { 0.0 }).collect()
    }

    fn features(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| normal_vec(&mut rng, d)).collect()
    }

    #[test]
    fn two_point_fit() {
        let f = fit_gaussian(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(f.mean, vec![1.0, 0.0]);
        assert_eq!(f.cov, vec![2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn fit_errors_and_degenerate() {
        assert!(fit_gaussian(&[vec![1.0f64]]).is_err());
        assert!(fit_gaussian(&[vec![1.0f64, 2.0], vec![1.0]]).is_err());
        let f = fit_gaussian(&vec![vec![3.0f64, 1.0]; 5]).unwrap();
        assert!(f.cov.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn fit_covariance_is_symmetric_psd() {
        let f = fit_gaussian(&features(40, 8, 2)).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert!((f.cov[i * 8 + j] - f.cov[j * 8 + i]).abs() <= 1e-9);
            }
        }
        let (vals, _) = symmetric_eigen(&f.cov, 8);
        assert!(vals.iter().all(|&l| l >= -1e-9));
    }

    #[test]
    fn closed_form_cases() {
        let d = 5;
        let a = GaussianFit::from_moments(vec![0.0; d], eye(d, 1.0), 10).unwrap();
        let mut mu = vec![0.0; d];
        mu[0] = 2.0;
        let b = GaussianFit::from_moments(mu, eye(d, 1.0), 10).unwrap();
        assert!((frechet_distance(&a, &b).unwrap() - 4.0).abs() < 1e-6);
        let c = GaussianFit::from_moments(vec![0.0; d], eye(d, 4.0), 10).unwrap();
        assert!((frechet_distance(&c, &a).unwrap() - d as f64).abs() < 1e-6);
        for (s, t) in [(0.5, 3.0), (2.0, 2.0), (9.0, 0.25)] {
            let x = GaussianFit::from_moments(vec![0.0; d], eye(d, s), 2).unwrap();
            let y = GaussianFit::from_moments(vec![0.0; d], eye(d, t), 2).unwrap();
            let expected = d as f64 * (s + t - 2.0 * (s * t).sqrt());
            assert!((frechet_distance(&x, &y).unwrap() - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn self_distance_is_zero() {
        let f = fit_gaussian(&features(100, 16, 5)).unwrap();
        assert!(frechet_distance(&f, &f).unwrap().abs() < 1e-8);
        let r = fit_gaussian(&features(10, 16, 5)).unwrap();
        assert!(frechet_distance(&r, &r).unwrap().abs() < 1e-8);
    }

    #[test]
    fn dimension_mismatch() {
        let a = fit_gaussian(&features(5, 3, 1)).unwrap();
        let b = fit_gaussian(&features(5, 4, 1)).unwrap();
        assert!(frechet_distance(&a, &b).is_err());
    }

    #[test]
    fn f32_agrees_with_f64() {
        let fa = features(60, 6, 11);
        let fb: Vec<Vec<f64>> = features(60, 6, 12).into_iter().map(|v| v.iter().map(|x| x * 1.5 + 0.2).collect()).collect();
        let d64 = fid_from_features(&fa, &fb).unwrap();
        let cast = |s: &[Vec<f64>]| s.iter().map(|v| v.iter().map(|&x| x as f32).collect()).collect::<Vec<Vec<f32>>>();
        let d32 = fid_from_features(&cast(&fa), &cast(&fb)).unwrap();
        assert!((d64 - d32 as f64).abs() < 1e-3 * d64.max(1.0), "{d64} vs {d32}");
    }

    fn random_orthogonal(d: usize, seed: u64) -> Vec<f64> {
        let m: Vec<f64> = normal_vec(&mut rng_from_seed(seed), d * d);
        let qr = nalgebra::DMatrix::from_row_slice(d, d, &m).qr();
        let q = qr.q();
        (0..d * d).map(|i| q[(i / d, i % d)]).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn symmetric_and_orthogonally_invariant(seed in 0u64..10_000, d in 2usize..7, shift in -2.0f64..2.0) {
            let fa = features(30, d, seed);
            let fb: Vec<Vec<f64>> = features(30, d, seed + 1)
                .into_iter()
                .map(|v| v.iter().enumerate().map(|(i, x)| x * (1.0 + 0.3 * i as f64) + shift).collect())
                .collect();
            let ab = fid_from_features(&fa, &fb).unwrap();
            let ba = fid_from_features(&fb, &fa).unwrap();
            prop_assert!((ab - ba).abs() < 1e-8);
            let q = random_orthogonal(d, seed ^ 0xabc);
            let rot = |s: &[Vec<f64>]| -> Vec<Vec<f64>> {
                s.iter().map(|v| (0..d).map(|i| (0..d).map(|k| q[i * d + k] * v[k]).sum()).collect()).collect()
            };
            let rotated = fid_from_features(&rot(&fa), &rot(&fb)).unwrap();
            prop_assert!((ab - rotated).abs() < 1e-6, "{} vs {}", ab, rotated);
            prop_assert!(ab >= 0.0);
        }
    }
}
