//! Pluggable image embedders and class-probability heads. The toy versions
//! stand in for pretrained networks.

use crate::grid::{resize_lanczos, Resolution, DEFAULT_LOBES};
use crate::rng::{derive_rng, normal_vec};
use crate::{ImageGrid, Result, Scalar};

pub trait FeatureEmbedder<T: Scalar>: Send + Sync {
    /// Stable identifier recorded in reports.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, image: &ImageGrid<T>) -> Result<Vec<T>>;

    fn embed_all(&self, images: &[ImageGrid<T>]) -> Result<Vec<Vec<T>>> {
        images.iter().map(|im| self.embed(im)).collect()
    }
}

pub trait ClassHead<T: Scalar>: Send + Sync {
    fn id(&self) -> String;
    fn classes(&self) -> usize;
    /// A probability vector over `classes()`.
    fn probabilities(&self, image: &ImageGrid<T>) -> Result<Vec<T>>;
}

pub const TOY_THUMB_WIDTH: usize = 8;
pub const TOY_THUMB_HEIGHT: usize = 4;
pub const TOY_EMBED_DIM: usize = 64;

/// Grayscale, Lanczos to 8×4, centre at 0.5, then a seed-pinned Gaussian
/// projection to 64 dimensions.
#[derive(Debug, Clone)]
pub struct ToyEmbedder<T> {
    seed: u64,
    projection: Vec<T>,
}

impl<T: Scalar> ToyEmbedder<T> {
    pub fn new(seed: u64) -> Self {
        let inputs = TOY_THUMB_WIDTH * TOY_THUMB_HEIGHT;
        let scale = T::one() / T::count(inputs).sqrt();
        let projection = normal_vec::<T, _>(&mut derive_rng(seed, "toy-embedder"), TOY_EMBED_DIM * inputs)
            .into_iter()
            .map(|w| w * scale)
            .collect();
        Self { seed, projection }
    }

    pub fn thumbnail(image: &ImageGrid<T>) -> Result<Vec<T>> {
        let gray = image.to_grayscale();
        let small = resize_lanczos(&gray, Resolution::new(TOY_THUMB_WIDTH, TOY_THUMB_HEIGHT)?, DEFAULT_LOBES)?;
        Ok(small.data().iter().map(|&v| v - T::lit(0.5)).collect())
    }
}

impl<T: Scalar> FeatureEmbedder<T> for ToyEmbedder<T> {
    fn id(&self) -> String {
        format!("toy-lanczos8x4-proj{TOY_EMBED_DIM}-seed{}", self.seed)
    }

    fn dim(&self) -> usize {
        TOY_EMBED_DIM
    }

    fn embed(&self, image: &ImageGrid<T>) -> Result<Vec<T>> {
        let x = Self::thumbnail(image)?;
        let k = x.len();
        Ok(self
            .projection
            .chunks_exact(k)
            .map(|row| row.iter().zip(&x).map(|(&w, &v)| w * v).sum())
            .collect())
    }
}

pub const TOY_CLASSES: usize = 10;

/// Softmax over a seed-pinned linear map of the toy embedding.
#[derive(Debug, Clone)]
pub struct ToyClassHead<T> {
    embedder: ToyEmbedder<T>,
    weights: Vec<T>,
    temperature: T,
}

impl<T: Scalar> ToyClassHead<T> {
    pub fn new(seed: u64) -> Self {
        let weights = normal_vec(&mut derive_rng(seed, "toy-class-head"), TOY_CLASSES * TOY_EMBED_DIM);
        Self { embedder: ToyEmbedder::new(seed), weights, temperature: T::lit(0.25) }
    }
}

impl<T: Scalar> ClassHead<T> for ToyClassHead<T> {
    fn id(&self) -> String {
        format!("toy-head{TOY_CLASSES}-{}", self.embedder.id())
    }

    fn classes(&self) -> usize {
        TOY_CLASSES
    }

    fn probabilities(&self, image: &ImageGrid<T>) -> Result<Vec<T>> {
        let e = self.embedder.embed(image)?;
        let logits: Vec<T> = self
            .weights
            .chunks_exact(TOY_EMBED_DIM)
            .map(|row| row.iter().zip(&e).map(|(&w, &v)| w * v).sum::<T>() / self.temperature)
            .collect();
        let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let ex: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
        let s: T = ex.iter().copied().sum();
        Ok(ex.into_iter().map(|v| v / s).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{noise_corpus, synthetic_radiograph};

    #[test]
    fn embedder_is_deterministic_with_fixed_dim() {
        let e = ToyEmbedder::<f64>::new(3);
        let img = synthetic_radiograph::<f64>(32, 64, 1).unwrap();
        let a = e.embed(&img).unwrap();
        assert_eq!(a.len(), TOY_EMBED_DIM);
        assert_eq!(a, ToyEmbedder::new(3).embed(&img).unwrap());
        assert_ne!(a, ToyEmbedder::new(4).embed(&img).unwrap());
        let rgb = img.replicate_channels(3).unwrap();
        let b = e.embed(&rgb).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
        let tiny = ImageGrid::<f64>::filled(3, 5, 1, 0.5);
        assert_eq!(e.embed(&tiny).unwrap().len(), TOY_EMBED_DIM);
    }

    #[test]
    fn head_rows_are_distributions() {
        let h = ToyClassHead::<f64>::new(1);
        for img in noise_corpus::<f64>(5, 16, 32, 2) {
            let p = h.probabilities(&img).unwrap();
            assert_eq!(p.len(), TOY_CLASSES);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
