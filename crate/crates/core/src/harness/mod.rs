//! Training, evaluation, checkpoints and prompt-driven detection.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod plot;
pub mod prompting;
pub mod setup;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{DataConfig, EvalConfig, KeypointSplit, LlmConfig, RunConfig, TrainConfig};
pub use eval::{evaluate, pck_correct, EvalReport};
pub use train::{train, TrainOutcome, Trainer};
