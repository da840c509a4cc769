//! Scene-encoder / motion-decoder transformer over discrete motion tokens,
//! with its own reverse-mode tape, AdamW training, joint rollout sampling,
//! checkpoints and adapters for the evaluation harnesses.

pub mod checkpoint;
pub mod model;
pub mod policy;
pub mod sample;
pub mod sweep;
pub mod tape;
pub mod train;

use drivescale_core::codec::{CodecError, Token};
use drivescale_core::eval::EvalError;
use drivescale_core::ledger::LedgerError;
use thiserror::Error;

pub use model::{JointModel, LossBreakdown, ModelConfig, Targets};
pub use sample::{JointRollout, ModeledAgent, SampleSpec};
pub use train::{TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input does not match the model: {0}")]
    Shape(String),
    #[error("prefix of {have} steps leaves nothing to predict within {max} steps")]
    PrefixTooLong { have: usize, max: usize },
    #[error("token {0} outside the vocabulary")]
    InvalidToken(Token),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}
