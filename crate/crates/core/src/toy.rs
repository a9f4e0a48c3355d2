//! Synthetic corpora standing in for real radiographs in tests and the toy
//! pipeline.

use rand::Rng;

use crate::degradation::gaussian_blur;
use crate::rng::{rng_from_seed, standard_normal};
use crate::{ImageGrid, Result, Scalar};

/// A smooth panoramic-style image: dark background, a bright mandibular arch
/// and a row of teeth along it. Shape parameters vary with `seed`.
pub fn synthetic_radiograph<T: Scalar>(height: usize, width: usize, seed: u64) -> Result<ImageGrid<T>> {
    let mut rng = rng_from_seed(seed);
    let (hf, wf) = (height as f64, width as f64);
    let curve = rng.random_range(0.25..0.45);
    let arch_y = rng.random_range(0.42..0.55);
    let band = rng.random_range(0.07..0.12);
    let bone = rng.random_range(0.45..0.6);
    let enamel = rng.random_range(0.75..0.92);
    let teeth = rng.random_range(10..16);
    let phase: f64 = rng.random_range(0.0..1.0);
    let tooth_h = rng.random_range(0.12..0.2);
    let bg = rng.random_range(0.08..0.18);
    let img = ImageGrid::from_fn(height, width, |y, x| {
        let u = (x as f64 + 0.5) / wf * 2.0 - 1.0;
        let v = (y as f64 + 0.5) / hf;
        let centre = arch_y + curve * u * u * 0.5;
        let d = (v - centre) / band;
        let mut p = bg + 0.08 * (1.0 - v) + bone * (-d * d).exp();
        let k = ((u + 1.0) * 0.5 * teeth as f64 + phase).fract();
        let gap = (k - 0.5).abs() * 2.0;
        let along = (v - (centre - tooth_h * 0.6)) / (tooth_h * 0.5);
        if gap < 0.75 && along.abs() < 1.0 {
            p += (enamel - p) * (1.0 - along * along) * (1.0 - (gap / 0.75).powi(4));
        }
        T::lit(p.clamp(0.0, 1.0))
    });
    gaussian_blur(&img, 0.8, 5)
}

pub fn radiograph_corpus<T: Scalar>(n: usize, height: usize, width: usize, seed: u64) -> Result<Vec<ImageGrid<T>>> {
    (0..n).map(|i| synthetic_radiograph(height, width, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))).collect()
}

/// Images from an equal mixture of two constant-mean Gaussian fields
/// (means 0.3 and 0.7, per-pixel std `std`), clamped to `[0, 1]`.
pub fn gaussian_mixture_corpus<T: Scalar>(n: usize, height: usize, width: usize, std: f64, seed: u64) -> Vec<ImageGrid<T>> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| {
            let mu = if rng.random_bool(0.5) { 0.3 } else { 0.7 };
            ImageGrid::from_fn(height, width, |_, _| {
                T::lit((mu + std * standard_normal::<f64, _>(&mut rng)).clamp(0.0, 1.0))
            })
        })
        .collect()
}

/// Uniform noise images, the "pure noise" baseline for distribution metrics.
pub fn noise_corpus<T: Scalar>(n: usize, height: usize, width: usize, seed: u64) -> Vec<ImageGrid<T>> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| ImageGrid::from_fn(height, width, |_, _| T::lit(rng.random_range(0.0..1.0))))
        .collect()
}
