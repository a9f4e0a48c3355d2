//! Two-stage HR→LR degradation and the weighted recipe pool that feeds the
//! super-resolution trainer.
//!
//! Stage one applies photon noise and JPEG quantization, stage two blurs and
//! adds Gaussian read noise, and a final Lanczos downscale produces the LR.

mod jpeg;

use std::collections::BTreeMap;
use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Poisson;

use crate::error::bail_arg;
use crate::grid::{resize_lanczos, DEFAULT_LOBES};
use crate::rng::{rng_from_seed, standard_normal};
use crate::{Error, ImageGrid, Resolution, Result, Scalar};

pub use jpeg::{jpeg_compress, quant_table};

/// Per pixel `k ~ Poisson(scale·p)`, output `k/scale` clamped to `[0, 1]`.
/// An infinite scale is the noiseless limit and returns the input.
pub fn poisson_noise<T: Scalar, R: Rng + ?Sized>(grid: &ImageGrid<T>, scale: f64, rng: &mut R) -> Result<ImageGrid<T>> {
    if !(scale > 0.0) {
        bail_arg!("poisson scale must be positive, got {scale}");
    }
    if scale.is_infinite() {
        return Ok(grid.clone());
    }
    let data = grid
        .data()
        .iter()
        .map(|&p| {
            let lambda = scale * p.as_f64().max(0.0);
            let k = if lambda > 0.0 {
                Poisson::new(lambda).map_err(|e| Error::Numeric(format!("poisson rate {lambda}: {e}")))?.sample(rng)
            } else {
                0.0
            };
            Ok(T::lit((k / scale).clamp(0.0, 1.0)))
        })
        .collect::<Result<_>>()?;
    Ok(grid.with_data(data))
}

fn gaussian_taps(sigma: f64, kernel: usize) -> Vec<f64> {
    let r = (kernel / 2) as i64;
    if sigma <= 0.0 {
        return (-r..=r).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
    }
    let raw: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Separable normalized Gaussian blur with edge clamping.
pub fn gaussian_blur<T: Scalar>(grid: &ImageGrid<T>, sigma: f64, kernel: usize) -> Result<ImageGrid<T>> {
    if kernel < 3 || kernel.is_multiple_of(2) {
        bail_arg!("blur kernel must be odd and at least 3, got {kernel}");
    }
    if !(sigma >= 0.0) {
        bail_arg!("blur sigma must be nonnegative, got {sigma}");
    }
    let taps: Vec<T> = gaussian_taps(sigma, kernel).into_iter().map(T::lit).collect();
    let r = (kernel / 2) as isize;
    let (h, w, c) = (grid.height() as isize, grid.width() as isize, grid.channels());
    let pass = |src: &[T], horizontal: bool| -> Vec<T> {
        let mut out = vec![T::zero(); src.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = T::zero();
                    for (k, &wt) in taps.iter().enumerate() {
                        let d = k as isize - r;
                        let (sy, sx) = if horizontal {
                            (y, (x + d).clamp(0, w - 1))
                        } else {
                            ((y + d).clamp(0, h - 1), x)
                        };
                        acc += wt * src[((sy * w + sx) as usize) * c + ch];
                    }
                    out[((y * w + x) as usize) * c + ch] = acc;
                }
            }
        }
        out
    };
    let tmp = pass(grid.data(), true);
    let out = pass(&tmp, false);
    Ok(grid.with_data(out).clamp_unit())
}

/// Adds i.i.d. `N(0, σ²)` per pixel, then clamps to `[0, 1]`.
///
/// Clamping pulls the mean of near-black and near-white pixels inward by the
/// truncated-normal offset.
pub fn gaussian_noise<T: Scalar, R: Rng + ?Sized>(grid: &ImageGrid<T>, sigma: f64, rng: &mut R) -> Result<ImageGrid<T>> {
    if !(sigma >= 0.0) {
        bail_arg!("noise sigma must be nonnegative, got {sigma}");
    }
    if sigma == 0.0 {
        return Ok(grid.clone());
    }
    let s = T::lit(sigma);
    let data = grid.data().iter().map(|&p| p + s * standard_normal::<T, R>(rng)).collect();
    Ok(grid.with_data(data).clamp_unit())
}

/// One concrete degradation: stage-one photon noise and JPEG, stage-two blur
/// and read noise, then a downscale by `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationRecipe {
    /// Photons per unit intensity; `inf` disables photon noise.
    pub poisson_scale: f64,
    pub jpeg_quality: u8,
    pub blur_sigma: f64,
    pub blur_kernel: usize,
    pub gauss_sigma: f64,
    pub scale: usize,
    pub seed: u64,
}

impl Default for DegradationRecipe {
    fn default() -> Self {
        Self {
            poisson_scale: 200.0,
            jpeg_quality: 75,
            blur_sigma: 1.0,
            blur_kernel: 7,
            gauss_sigma: 0.02,
            scale: 4,
            seed: 0,
        }
    }
}

impl DegradationRecipe {
    pub fn validate(&self) -> Result<()> {
        if !(self.poisson_scale > 0.0) {
            bail_arg!("poisson_scale must be positive");
        }
        if !(1..=100).contains(&self.jpeg_quality) {
            bail_arg!("jpeg_quality must lie in 1..=100, got {}", self.jpeg_quality);
        }
        if self.blur_kernel < 3 || self.blur_kernel.is_multiple_of(2) {
            bail_arg!("blur_kernel must be odd and >= 3, got {}", self.blur_kernel);
        }
        if !(self.blur_sigma >= 0.0 && self.gauss_sigma >= 0.0) {
            bail_arg!("blur_sigma and gauss_sigma must be nonnegative");
        }
        if !(2..=4).contains(&self.scale) {
            bail_arg!("scale must be 2, 3 or 4, got {}", self.scale);
        }
        Ok(())
    }

    /// `key = value` lines, one field each.
    pub fn to_kv(&self) -> String {
        format!(
            "poisson_scale = {}\njpeg_quality = {}\nblur_sigma = {}\nblur_kernel = {}\ngauss_sigma = {}\nscale = {}\nseed = {}\n",
            self.poisson_scale, self.jpeg_quality, self.blur_sigma, self.blur_kernel, self.gauss_sigma, self.scale, self.seed
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let get = |k: &str| map.get(k).ok_or_else(|| Error::Format(format!("recipe is missing {k:?}")));
        fn num<V: std::str::FromStr>(k: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| Error::Format(format!("bad value for {k}: {v:?}")))
        }
        let r = Self {
            poisson_scale: num("poisson_scale", get("poisson_scale")?)?,
            jpeg_quality: num("jpeg_quality", get("jpeg_quality")?)?,
            blur_sigma: num("blur_sigma", get("blur_sigma")?)?,
            blur_kernel: num("blur_kernel", get("blur_kernel")?)?,
            gauss_sigma: num("gauss_sigma", get("gauss_sigma")?)?,
            scale: num("scale", get("scale")?)?,
            seed: num("seed", get("seed")?)?,
        };
        r.validate()?;
        Ok(r)
    }
}

impl fmt::Display for DegradationRecipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "x{} poisson={} q={} blur={}/{} noise={}",
            self.scale, self.poisson_scale, self.jpeg_quality, self.blur_sigma, self.blur_kernel, self.gauss_sigma
        )
    }
}

/// Parses `key = value` lines, ignoring blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key = value", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Applies both stages and the downscale; returns the untouched HR and its LR.
pub fn degrade_pair<T: Scalar, R: Rng + ?Sized>(
    hr: &ImageGrid<T>,
    recipe: &DegradationRecipe,
    rng: &mut R,
) -> Result<(ImageGrid<T>, ImageGrid<T>)> {
    recipe.validate()?;
    let s = recipe.scale;
    if !hr.height().is_multiple_of(s) || !hr.width().is_multiple_of(s) {
        bail_arg!("{}x{} is not divisible by scale {s}", hr.width(), hr.height());
    }
    let x = poisson_noise(hr, recipe.poisson_scale, rng)?;
    let x = jpeg_compress(&x, recipe.jpeg_quality);
    let x = gaussian_blur(&x, recipe.blur_sigma, recipe.blur_kernel)?;
    let x = gaussian_noise(&x, recipe.gauss_sigma, rng)?;
    let target = Resolution::new(hr.width() / s, hr.height() / s)?;
    let lr = resize_lanczos(&x, target, DEFAULT_LOBES)?;
    Ok((hr.clone(), lr))
}

/// [`degrade_pair`] driven by the recipe's own seed.
pub fn degrade_pair_seeded<T: Scalar>(hr: &ImageGrid<T>, recipe: &DegradationRecipe) -> Result<(ImageGrid<T>, ImageGrid<T>)> {
    degrade_pair(hr, recipe, &mut rng_from_seed(recipe.seed))
}

/// Ranges that randomized recipes are drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationRanges {
    pub poisson_scale: (f64, f64),
    pub jpeg_quality: (u8, u8),
    pub blur_sigma: (f64, f64),
    pub blur_kernel: usize,
    pub gauss_sigma: (f64, f64),
}

impl Default for DegradationRanges {
    fn default() -> Self {
        Self {
            poisson_scale: (50.0, 500.0),
            jpeg_quality: (30, 95),
            blur_sigma: (0.2, 3.0),
            blur_kernel: 7,
            gauss_sigma: (0.0, 0.1),
        }
    }
}

impl DegradationRanges {
    pub fn draw<R: Rng + ?Sized>(&self, scale: usize, rng: &mut R) -> DegradationRecipe {
        let uni = |rng: &mut R, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        DegradationRecipe {
            poisson_scale: uni(rng, self.poisson_scale),
            jpeg_quality: rng.random_range(self.jpeg_quality.0..=self.jpeg_quality.1.max(self.jpeg_quality.0)),
            blur_sigma: uni(rng, self.blur_sigma),
            blur_kernel: self.blur_kernel,
            gauss_sigma: uni(rng, self.gauss_sigma),
            scale,
            seed: rng.random(),
        }
    }
}

/// Weighted recipe list; weights are normalized to sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPool {
    recipes: Vec<DegradationRecipe>,
    weights: Vec<f64>,
    /// Pairs produced by [`PairPool::fill`].
    pub capacity: usize,
}

impl PairPool {
    pub fn new(entries: Vec<(DegradationRecipe, f64)>, capacity: usize) -> Result<Self> {
        if entries.is_empty() {
            bail_arg!("pair pool needs at least one recipe");
        }
        for (r, w) in &entries {
            r.validate()?;
            if !(*w > 0.0 && w.is_finite()) {
                bail_arg!("recipe weights must be positive, got {w}");
            }
        }
        let total: f64 = entries.iter().map(|e| e.1).sum();
        let (recipes, weights) = entries.into_iter().map(|(r, w)| (r, w / total)).unzip();
        Ok(Self { recipes, weights, capacity })
    }

    /// `per_scale` random recipes for each scale, equally weighted.
    pub fn randomized(scales: &[usize], per_scale: usize, ranges: &DegradationRanges, capacity: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let entries = scales
            .iter()
            .flat_map(|&s| (0..per_scale).map(move |_| s))
            .map(|s| (ranges.draw(s, &mut rng), 1.0))
            .collect();
        Self::new(entries, capacity)
    }

    pub fn recipes(&self) -> &[DegradationRecipe] {
        &self.recipes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Index of a recipe drawn by weight.
    pub fn draw_recipe<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        WeightedIndex::new(&self.weights).expect("validated weights").sample(rng)
    }

    /// Recipe-text dump of the whole pool, one `[recipe]` section each.
    pub fn to_kv(&self) -> String {
        let mut out = format!("capacity = {}\n", self.capacity);
        for (r, w) in self.recipes.iter().zip(&self.weights) {
            out.push_str(&format!("\n[recipe]\nweight = {w}\n{}", r.to_kv()));
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut sections = text.split("[recipe]");
        let head = parse_kv(sections.next().unwrap_or(""))?;
        let capacity = head
            .get("capacity")
            .ok_or_else(|| Error::Format("pool is missing capacity".into()))?
            .parse()
            .map_err(|_| Error::Format("bad capacity".into()))?;
        let mut entries = Vec::new();
        for sec in sections {
            let map = parse_kv(sec)?;
            let w = map
                .get("weight")
                .and_then(|w| w.parse().ok())
                .ok_or_else(|| Error::Format("recipe is missing a weight".into()))?;
            entries.push((DegradationRecipe::from_kv(sec.replace("weight", "#weight").as_str())?, w));
        }
        Self::new(entries, capacity)
    }
}

/// A produced training pair and the recipe that made it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair<T> {
    pub hr: ImageGrid<T>,
    pub lr: ImageGrid<T>,
    pub recipe: usize,
    pub source: usize,
}

/// Draws a recipe by weight and an HR image uniformly, then degrades it.
pub fn pool_draw<T: Scalar, R: Rng + ?Sized>(
    pool: &PairPool,
    corpus: &[ImageGrid<T>],
    rng: &mut R,
) -> Result<TrainingPair<T>> {
    if corpus.is_empty() {
        bail_arg!("HR corpus is empty");
    }
    let recipe = pool.draw_recipe(rng);
    let source = rng.random_range(0..corpus.len());
    let (hr, lr) = degrade_pair(&corpus[source], &pool.recipes[recipe], rng)?;
    Ok(TrainingPair { hr, lr, recipe, source })
}

impl PairPool {
    /// `capacity` draws from the corpus.
    pub fn fill<T: Scalar, R: Rng + ?Sized>(&self, corpus: &[ImageGrid<T>], rng: &mut R) -> Result<Vec<TrainingPair<T>>> {
        (0..self.capacity).map(|_| pool_draw(self, corpus, rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::resize_lanczos;

    fn textured(h: usize, w: usize) -> ImageGrid<f64> {
        ImageGrid::from_fn(h, w, |y, x| 0.5 + 0.35 * ((x as f64) * 0.3).sin() * ((y as f64) * 0.2).cos())
    }

    #[test]
    fn poisson_limits() {
        let mut rng = rng_from_seed(1);
        let zeros = ImageGrid::<f64>::zeros(8, 8);
        assert_eq!(poisson_noise(&zeros, 100.0, &mut rng).unwrap(), zeros);
        let img = textured(16, 16);
        let sharp = poisson_noise(&img, 1e6, &mut rng).unwrap();
        let max = img.data().iter().zip(sharp.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max < 0.01, "{max}");
        assert!(poisson_noise(&img, 0.0, &mut rng).is_err());
    }

    #[test]
    fn poisson_mean_at_half_gray() {
        let mut rng = rng_from_seed(2);
        let img = ImageGrid::filled(100, 100, 1, 0.5);
        let out = poisson_noise(&img, 100.0, &mut rng).unwrap();
        let mean = out.data().iter().sum::<f64>() / out.len() as f64;
        assert!((mean - 0.5).abs() < 0.015, "{mean}");
    }

    #[test]
    fn blur_identities_and_errors() {
        let c = ImageGrid::filled(9, 7, 1, 0.3f64);
        let b = gaussian_blur(&c, 2.0, 7).unwrap();
        assert!(b.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
        let img = textured(9, 7);
        assert_eq!(gaussian_blur(&img, 0.0, 5).unwrap(), img);
        assert!(gaussian_blur(&img, 1.0, 4).is_err());
        assert!(gaussian_blur(&img, 1.0, 1).is_err());
    }

    #[test]
    fn blur_then_decimate_matches_direct_convolution() {
        let img = textured(16, 16);
        let (sigma, k) = (1.3, 5);
        let blurred = gaussian_blur(&img, sigma, k).unwrap();
        let r = (k / 2) as i64;
        let g = |d: i64| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp();
        let norm: f64 = (-r..=r).map(g).sum::<f64>().powi(2);
        for y in (0..16).step_by(2) {
            for x in (0..16).step_by(2) {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sy = (y as i64 + dy).clamp(0, 15) as usize;
                        let sx = (x as i64 + dx).clamp(0, 15) as usize;
                        acc += g(dy) * g(dx) * img.get(sy, sx, 0);
                    }
                }
                assert!((acc / norm - blurred.get(y, x, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noise_std_and_clamp_bias() {
        let mut rng = rng_from_seed(3);
        let mid = ImageGrid::filled(1000, 1000, 1, 0.5);
        let out = gaussian_noise(&mid, 0.05, &mut rng).unwrap();
        let n = out.len() as f64;
        let mean = out.data().iter().sum::<f64>() / n;
        let std = (out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.05).abs() < 0.001, "{std}");
        assert_eq!(gaussian_noise(&mid, 0.0, &mut rng).unwrap(), mid);

        // at 0 the clamped normal has mean σ/√(2π)
        let dark = ImageGrid::filled(300, 300, 1, 0.0);
        let out = gaussian_noise(&dark, 0.05, &mut rng).unwrap();
        let m = out.data().iter().sum::<f64>() / out.len() as f64;
        let expect = 0.05 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((m - expect).abs() < 5e-4, "{m} vs {expect}");
    }

    #[test]
    fn identity_like_recipe_is_plain_lanczos() {
        let img = textured(32, 48);
        let recipe = DegradationRecipe {
            poisson_scale: f64::INFINITY,
            jpeg_quality: 100,
            blur_sigma: 0.0,
            blur_kernel: 3,
            gauss_sigma: 0.0,
            scale: 4,
            seed: 1,
        };
        let (hr, lr) = degrade_pair_seeded(&img, &recipe).unwrap();
        assert_eq!(hr, img);
        let direct = resize_lanczos(&img, Resolution::new(12, 8).unwrap(), DEFAULT_LOBES).unwrap();
        let max = lr.data().iter().zip(direct.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max <= 3.0 / 255.0, "{max}");
    }

    #[test]
    fn fourfold_pair_shape_and_determinism() {
        let img = ImageGrid::from_fn(512, 1024, |y, x| ((x + y) % 17) as f64 / 16.0);
        let recipe = DegradationRecipe { seed: 99, ..DegradationRecipe::default() };
        let (_, a) = degrade_pair_seeded(&img, &recipe).unwrap();
        let (_, b) = degrade_pair_seeded(&img, &recipe).unwrap();
        assert_eq!((a.width(), a.height()), (256, 128));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(degrade_pair_seeded(&textured(30, 30), &recipe).is_err());
    }

    #[test]
    fn recipe_and_pool_text_round_trip() {
        let pool = PairPool::randomized(&[2, 3, 4], 2, &DegradationRanges::default(), 10, 5).unwrap();
        let text = pool.to_kv();
        let back = PairPool::from_kv(&text).unwrap();
        assert_eq!(back.capacity, 10);
        assert_eq!(back.recipes(), pool.recipes());
        for (a, b) in back.weights().iter().zip(pool.weights()) {
            assert!((a - b).abs() < 1e-15);
        }
        let r = DegradationRecipe { poisson_scale: f64::INFINITY, ..Default::default() };
        assert_eq!(DegradationRecipe::from_kv(&r.to_kv()).unwrap(), r);
        assert!(DegradationRecipe::from_kv("scale = 4").is_err());
    }

    #[test]
    fn pool_validation() {
        assert!(PairPool::new(vec![], 1).is_err());
        assert!(PairPool::new(vec![(DegradationRecipe::default(), 0.0)], 1).is_err());
        let bad = DegradationRecipe { scale: 5, ..Default::default() };
        assert!(PairPool::new(vec![(bad, 1.0)], 1).is_err());
        let pool = PairPool::new(vec![(DegradationRecipe::default(), 3.0)], 2).unwrap();
        assert!(pool_draw::<f64, _>(&pool, &[], &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn single_recipe_pool_is_degrade_pair() {
        let img = textured(16, 16);
        let recipe = DegradationRecipe { scale: 2, ..Default::default() };
        let pool = PairPool::new(vec![(recipe.clone(), 1.0)], 1).unwrap();
        let mut r1 = rng_from_seed(4);
        let pair = pool_draw(&pool, std::slice::from_ref(&img), &mut r1).unwrap();
        let mut r2 = rng_from_seed(4);
        assert_eq!(pool.draw_recipe(&mut r2), 0);
        let _ = r2.random_range(0..1usize);
        let (_, lr) = degrade_pair(&img, &recipe, &mut r2).unwrap();
        assert_eq!(pair.lr, lr);
    }

    #[test]
    fn draw_frequencies_follow_weights() {
        let mut entries = Vec::new();
        for (s, w) in [(2, 0.2), (3, 0.3), (4, 0.5)] {
            entries.push((DegradationRecipe { scale: s, ..Default::default() }, w));
        }
        let pool = PairPool::new(entries, 0).unwrap();
        let mut rng = rng_from_seed(6);
        let n = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[pool.draw_recipe(&mut rng)] += 1;
        }
        for (c, p) in counts.iter().zip([0.2, 0.3, 0.5]) {
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sd, "{counts:?}");
        }
        assert!(counts.iter().all(|&c| c > 0));
    }
}
