//! Vector quantization of frame features.

mod codebook;
mod loss;

pub use codebook::{
    default_parents, Codebook, QuantizeResult, VqVariant, DEFAULT_BETA, DEFAULT_CODEBOOK_SIZE,
    DEFAULT_CODE_DIM,
};
pub use loss::{
    codebook_utilization, straight_through, straight_through_backward, vq_loss, UsageTracker,
    Utilization, VqLoss,
};
