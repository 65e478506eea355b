//! Text-synopsis to keyframe-storyboard ordering.
//!
//! The crate covers the whole pipeline over precomputed (or synthetic)
//! embeddings: vector quantization of frame features, a prefix-attention
//! decoder that emits frame features autoregressively, similarity-based
//! ordering baselines, text-to-frame retrieval and both evaluation protocols
//! (ordering with Kendall's tau, retrieve-and-order with R@K times tau@K).

pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod nn;
pub mod ordering;
pub mod pipeline;
pub mod retrieval;
pub mod vq;

pub use error::{Error, Result};
