//! Exact t-SNE for small corpora, plus centroid distances between embedded
//! clusters.

use crate::error::bail_arg;
use crate::rng::{rng_from_seed, standard_normal};
use crate::{Result, Scalar};

pub const TSNE_MAX_POINTS: usize = 5000;
pub const TSNE_MIN_POINTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    /// `None` picks `max(n / exaggeration / 4, 50)`, which keeps the strong
    /// affinities of small corpora from oscillating.
    pub learning_rate: Option<f64>,
    pub exaggeration: f64,
    /// Iterations with exaggerated affinities and low momentum.
    pub early_iterations: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: None,
            exaggeration: 12.0,
            early_iterations: 250,
            seed: 0,
        }
    }
}

fn squared_distances<T: Scalar>(x: &[Vec<T>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = x[i].iter().zip(&x[j]).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Conditional affinities `p(j|i)` with the bandwidth of each row set by
/// bisection so that its entropy (nats) equals `ln(perplexity)`. Returns the
/// rows and their achieved entropies.
pub(crate) fn conditional_affinities(dist: &[f64], n: usize, perplexity: f64) -> (Vec<f64>, Vec<f64>) {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut entropies = vec![0.0; n];
    for i in 0..n {
        let row = &dist[i * n..(i + 1) * n];
        let dmin = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::INFINITY, f64::min);
        let eval = |beta: f64, out: &mut [f64]| -> f64 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j == i {
                    out[j] = 0.0;
                    continue;
                }
                let dj = row[j] - dmin;
                let e = (-beta * dj).exp();
                out[j] = e;
                sum += e;
                weighted += dj * e;
            }
            for v in out.iter_mut() {
                *v /= sum;
            }
            sum.ln() + beta * weighted / sum
        };
        let out = &mut p[i * n..(i + 1) * n];
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut beta = 1.0 / row.iter().sum::<f64>().max(1e-300) * (n as f64);
        let mut h = eval(beta, out);
        for _ in 0..200 {
            if (h - target).abs() < 1e-7 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
            h = eval(beta, out);
        }
        entropies[i] = h;
    }
    (p, entropies)
}

/// Exact-gradient t-SNE to two dimensions.
pub fn tsne_2d<T: Scalar>(features: &[Vec<T>], cfg: &TsneConfig) -> Result<Vec<[T; 2]>> {
    let n = features.len();
    if n < TSNE_MIN_POINTS {
        bail_arg!("t-SNE needs at least {TSNE_MIN_POINTS} points, got {n}");
    }
    if n > TSNE_MAX_POINTS {
        bail_arg!("exact t-SNE is limited to {TSNE_MAX_POINTS} points, got {n}; subsample the corpus first");
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        bail_arg!("features must share one nonzero dimension");
    }
    if !(cfg.perplexity > 0.0 && cfg.perplexity < n as f64 / 3.0) {
        bail_arg!("perplexity must be in (0, {}), got {}", n as f64 / 3.0, cfg.perplexity);
    }
    let eta = cfg.learning_rate.unwrap_or((n as f64 / cfg.exaggeration / 4.0).max(50.0));
    if !(eta > 0.0) || !(cfg.exaggeration >= 1.0) {
        bail_arg!("learning rate must be positive and exaggeration at least 1");
    }
    let dist = squared_distances(features);
    let (cond, _) = conditional_affinities(&dist, n, cfg.perplexity);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = rng_from_seed(cfg.seed);
    let mut y: Vec<f64> = (0..2 * n).map(|_| 1e-4 * standard_normal::<f64, _>(&mut rng)).collect();
    let mut update = vec![0.0f64; 2 * n];
    let mut gains = vec![1.0f64; 2 * n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![0.0; 2 * n];
    for it in 0..cfg.iterations {
        let early = it < cfg.early_iterations;
        let exag = if early { cfg.exaggeration } else { 1.0 };
        let momentum = if early { 0.5 } else { 0.8 };
        let mut zsum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[2 * i] - y[2 * j];
                let dy = y[2 * i + 1] - y[2 * j + 1];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = v;
                num[j * n + i] = v;
                zsum += 2.0 * v;
            }
        }
        for i in 0..n {
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let v = num[i * n + j];
                let m = (exag * p[i * n + j] - v / zsum) * v;
                gx += m * (y[2 * i] - y[2 * j]);
                gy += m * (y[2 * i + 1] - y[2 * j + 1]);
            }
            grad[2 * i] = 4.0 * gx;
            grad[2 * i + 1] = 4.0 * gy;
        }
        for k in 0..2 * n {
            gains[k] = if (grad[k] > 0.0) != (update[k] > 0.0) { gains[k] + 0.2 } else { (gains[k] * 0.8).max(0.01) };
            update[k] = momentum * update[k] - eta * gains[k] * grad[k];
            y[k] += update[k];
        }
        for c in 0..2 {
            let mean = (0..n).map(|i| y[2 * i + c]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| y[2 * i + c] -= mean);
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(crate::Error::Numeric("t-SNE diverged".into()));
    }
    Ok((0..n).map(|i| [T::lit(y[2 * i]), T::lit(y[2 * i + 1])]).collect())
}

pub fn centroid<T: Scalar>(points: &[[T; 2]]) -> Result<[T; 2]> {
    if points.is_empty() {
        bail_arg!("centroid of an empty point set");
    }
    let n = T::count(points.len());
    let sx: T = points.iter().map(|p| p[0]).sum();
    let sy: T = points.iter().map(|p| p[1]).sum();
    Ok([sx / n, sy / n])
}

/// Euclidean distance between the means of two point sets.
pub fn centroid_distance<T: Scalar>(a: &[[T; 2]], b: &[[T; 2]]) -> Result<T> {
    let (ca, cb) = (centroid(a)?, centroid(b)?);
    Ok(((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_vec;
    use proptest::prelude::*;

    fn blobs(per: usize, sigma: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = rng_from_seed(seed);
        let mut x = Vec::new();
        let mut labels = Vec::new();
        for (label, centre) in [0.0, 10.0].into_iter().enumerate() {
            for _ in 0..per {
                let z: Vec<f64> = normal_vec(&mut rng, 3);
                x.push(z.iter().enumerate().map(|(k, v)| v * sigma + if k == 0 { centre } else { 0.0 }).collect());
                labels.push(label);
            }
        }
        (x, labels)
    }

    // Mean silhouette coefficient with Euclidean distance.
    fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> f64 {
        let d = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let k = labels.iter().max().unwrap() + 1;
        let mut total = 0.0;
        for (i, p) in points.iter().enumerate() {
            let mut sums = vec![0.0; k];
            let mut counts = vec![0usize; k];
            for (j, q) in points.iter().enumerate() {
                if i != j {
                    sums[labels[j]] += d(p, q);
                    counts[labels[j]] += 1;
                }
            }
            let a = sums[labels[i]] / counts[labels[i]] as f64;
            let b = (0..k).filter(|&c| c != labels[i]).map(|c| sums[c] / counts[c] as f64).fold(f64::INFINITY, f64::min);
            total += (b - a) / a.max(b);
        }
        total / points.len() as f64
    }

    #[test]
    fn separated_blobs_stay_separated() {
        let (x, labels) = blobs(100, 0.1, 3);
        let cfg = TsneConfig { perplexity: 30.0, iterations: 500, seed: 1, ..Default::default() };
        let y = tsne_2d(&x, &cfg).unwrap();
        let s = silhouette(&y, &labels);
        assert!(s > 0.8, "silhouette {s}");
        assert_eq!(y, tsne_2d(&x, &cfg).unwrap());
    }

    #[test]
    fn entropy_matches_perplexity() {
        let (x, _) = blobs(40, 1.0, 8);
        let dist = squared_distances(&x);
        for perp in [5.0, 12.5, 25.0] {
            let (p, h) = conditional_affinities(&dist, 80, perp);
            for i in 0..80 {
                assert!((h[i] - f64::ln(perp)).abs() < 1e-4);
                let row = &p[i * 80..(i + 1) * 80];
                let direct: f64 = -row.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
                assert!((direct - f64::ln(perp)).abs() < 1e-4, "row {i}: {direct}");
            }
        }
    }

    #[test]
    fn duplicates_stay_together() {
        let (x, _) = blobs(30, 1.0, 21);
        let doubled: Vec<Vec<f64>> = x.iter().flat_map(|v| [v.clone(), v.clone()]).collect();
        let y = tsne_2d(&doubled, &TsneConfig { perplexity: 10.0, iterations: 1000, seed: 2, ..Default::default() }).unwrap();
        let d = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        for half in [0..60usize, 60..120] {
            let pts: Vec<_> = half.clone().map(|i| y[i]).collect();
            let diameter = pts.iter().flat_map(|a| pts.iter().map(move |b| d(a, b))).fold(0.0f64, f64::max);
            for i in half.step_by(2) {
                assert!(d(&y[i], &y[i + 1]) < diameter / 10.0, "twin {i}: {} vs diameter {diameter}", d(&y[i], &y[i + 1]));
            }
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        let few = vec![vec![0.0f64]; 4];
        assert!(tsne_2d(&few, &TsneConfig { perplexity: 1.0, ..Default::default() }).is_err());
        let ok = vec![vec![0.0f64]; 9];
        assert!(tsne_2d(&ok, &TsneConfig { perplexity: 3.0, ..Default::default() }).is_err());
        let many = vec![vec![0.0f64]; TSNE_MAX_POINTS + 1];
        let err = tsne_2d(&many, &TsneConfig::default()).unwrap_err().to_string();
        assert!(err.contains("subsample"));
    }

    #[test]
    fn centroid_cases() {
        assert_eq!(centroid_distance(&[[0.0f64, 0.0]], &[[3.0, 4.0]]).unwrap(), 5.0);
        let a = [[1.0f64, 2.0], [3.0, -1.0]];
        assert_eq!(centroid_distance(&a, &a).unwrap(), 0.0);
        assert!(centroid_distance::<f64>(&[], &a).is_err());
    }

    proptest! {
        #[test]
        fn centroid_distance_is_translation_invariant(
            a in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..20),
            b in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..20),
            vx in -100.0f64..100.0, vy in -100.0f64..100.0,
        ) {
            let pa: Vec<[f64; 2]> = a.iter().map(|&(x, y)| [x, y]).collect();
            let pb: Vec<[f64; 2]> = b.iter().map(|&(x, y)| [x, y]).collect();
            let shift = |p: &[[f64; 2]]| p.iter().map(|q| [q[0] + vx, q[1] + vy]).collect::<Vec<_>>();
            let before = centroid_distance(&pa, &pb).unwrap();
            let after = centroid_distance(&shift(&pa), &shift(&pb)).unwrap();
            prop_assert!((before - after).abs() < 1e-9);
        }
    }
}
