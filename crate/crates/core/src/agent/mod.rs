//! Deep Q-learning keep-alive agent.

pub mod dqn;
pub mod encoder;
pub mod model;
pub mod network;
pub mod replay;
pub mod train;

pub use dqn::{argmax, select_action, td_step, RewardMode, TdScratch, TrainConfig};
pub use encoder::{encode, encode_into, state_dim, NormStats, Standardizer};
pub use model::{load_model, read_model, save_model, write_model, MODEL_FORMAT, MODEL_VERSION};
pub use network::{mse_loss_and_grad, Dense, Gradients, QNetwork, RegressionSample};
pub use replay::{ReplayBuffer, Transition};
pub use train::{train, train_on, write_training_log, DqnPolicy, EpisodeLog, TrainOutput, TrainedModel};

use crate::carbon::CarbonError;
use crate::engine::EngineError;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("invalid network shape: {0}")]
    Shape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training split is empty")]
    EmptyTraining,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged in episode {episode} after {updates} updates: {detail}")]
    Diverged { episode: usize, updates: u64, detail: String },
    #[error("model file version {found} is not supported (expected {supported})")]
    Version { found: u32, supported: u32 },
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error("model has {model} actions but the configuration has {config}")]
    ActionCount { model: usize, config: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Carbon(#[from] CarbonError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = AgentError> = std::result::Result<T, E>;
