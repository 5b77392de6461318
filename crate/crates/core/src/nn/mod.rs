//! Minimal differentiable-layer kernel: dense, 2-D convolution, 2-D transposed
//! convolution, ReLU and sigmoid with layer-level reverse-mode gradients, plus
//! Adam, gradient clipping and a finite-difference oracle.

pub mod gradcheck;
mod layer;
mod optim;
mod params;
mod sequential;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_at, GradCheckReport};
pub use layer::{sigmoid, ConvGeom, LayerSpec};
pub use optim::{clip_gradients, global_norm, AdamConfig, OptimizerState};
pub use params::{ModelParams, Section};
pub use sequential::{Sequential, Tape};
pub use tensor::Tensor;
