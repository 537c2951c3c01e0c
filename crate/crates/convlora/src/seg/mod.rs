//! Mask decoder with a classification branch, bipartite matching, the
//! multi-class and binary training losses, semantic inference, and metrics.

mod decoder;
mod hungarian;
mod loss;
mod metrics;

pub use decoder::{DecoderConfig, DecoderOutput, MaskDecoder};
pub use hungarian::{hungarian_match, Matching};
pub use loss::{match_cost, multiclass_loss, structure_loss, GtSegments, LossWeights};
pub use metrics::{binary_metrics, mean_iou, semantic_inference, BinaryMetrics};
