//! Generative-quality metrics: FID, Inception Score, exact t-SNE, centroid
//! distances and ROC/PR curves.

mod curves;
mod embed;
mod frechet;
mod inception;
pub mod linalg;
mod report;
mod tsne;

pub use curves::{
    pr_csv, pr_curve, roc_csv, roc_curve, vertical_average, PrCurve, PrPoint, RocCurve, RocPoint,
    ScoredLabel, Truth,
};
pub use embed::{
    ClassHead, FeatureEmbedder, ToyClassHead, ToyEmbedder, TOY_CLASSES, TOY_EMBED_DIM,
    TOY_THUMB_HEIGHT, TOY_THUMB_WIDTH,
};
pub use frechet::{fid_from_features, fit_gaussian, frechet_distance, GaussianFit};
pub use inception::{inception_score, DEFAULT_IS_SPLITS};
pub use report::{embedding_csv, MetricReport};
pub use tsne::{centroid, centroid_distance, tsne_2d, TsneConfig, TSNE_MAX_POINTS, TSNE_MIN_POINTS};

use crate::{ImageGrid, Result, Scalar};

/// FID between two image sets under `embedder`.
pub fn image_fid<T: Scalar>(
    embedder: &dyn FeatureEmbedder<T>,
    a: &[ImageGrid<T>],
    b: &[ImageGrid<T>],
) -> Result<T> {
    fid_from_features(&embedder.embed_all(a)?, &embedder.embed_all(b)?)
}

/// Inception Score of an image set under `head`.
pub fn image_inception_score<T: Scalar>(
    head: &dyn ClassHead<T>,
    images: &[ImageGrid<T>],
    splits: usize,
) -> Result<(T, T)> {
    let probs = images.iter().map(|im| head.probabilities(im)).collect::<Result<Vec<_>>>()?;
    inception_score(&probs, splits)
}
