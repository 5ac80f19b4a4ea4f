//! Encoder-decoder Transformer with a shared target-first embedding.

pub mod batch;
pub mod beam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use batch::{Batch, Example};
pub use beam::{beam_search, greedy, Hypothesis};
pub use checkpoint::Checkpoint;
pub use graph::ParamStore;
pub use tensor::{Float, Matrix};
pub use train::{StepInfo, TrainConfig, TrainReport, Trainer};
pub use transformer::{AttentionDump, ModelConfig, Transformer};
