//! Differentiable models, losses, optimizer, training loops and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod head;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod orderer;
pub mod rerank;
pub mod tape;
pub mod train;

pub use checkpoint::{Bundle, Checkpoint};
pub use gradcheck::{grad_check, GradCheckReport};
pub use head::{train_retrieval_head, HeadConfig, RetrievalExample, RetrievalHead};
pub use loss::{align_loss, info_nce, nce_loss, total_loss};
pub use optim::{AdamW, LinearSchedule};
pub use orderer::{build_prefix_mask, text_tokens, Conditioning, OrdererConfig, OrdererModel};
pub use rerank::{train_rerank, RerankConfig, RerankModel};
pub use tape::{Grads, ParamId, ParamSet, Tape};
pub use train::{
    evaluate_loss, frame_matrix, prepare_sequences, train_orderer, LossRecord, NegativePolicy, SequenceExample,
    TrainConfig,
};
