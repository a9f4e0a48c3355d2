//! Minimal reverse-mode autodiff and the layers the networks are built from.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{Graph, Var};
pub use layers::{attention, grid_to_tensor, tensor_to_grid, Conv, LayerNorm, Linear};
pub use params::{clip_gradients, AdamWConfig, EmaParams, Gradients, OptimizerState, ParamId, ParamStore};
pub use tensor::Tensor;
