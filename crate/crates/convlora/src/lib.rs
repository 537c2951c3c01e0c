//! Conv-LoRA at desk scale: low-rank adapters with MoE-gated convolutional
//! experts, a miniature ViT segmentation model, and the training/analysis
//! harness around them.

pub mod adapters;
pub mod encoder;
pub mod analysis;
pub mod error;
pub mod harness;
pub mod params;
pub mod scalar;
pub mod seg;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default double-precision tensor.
pub type Tensor = tensor::Tensor<f64>;
/// Default double-precision tape.
pub type Graph = tensor::Graph<f64>;
