//! Imitation learning, proxy rewards and session-level PPO.

mod advantage;
mod il;
mod ppo;
pub(crate) mod session_opt;
pub mod toy;
mod value;

use thiserror::Error;

pub use advantage::{proxy_reward, state_advantage, state_advantages, AdvantageConfig};
pub use il::{
    il_examples, il_gradient, il_loss, il_update, loss_positions, train_il, IlConfig, IlExample,
};
pub use ppo::{
    ppo_update, ppo_update_samples, surrogate, PpoConfig, PpoDecision, PpoReport, PpoSession,
};
pub use session_opt::{
    evaluate, proxy_rewards, session_level_optimize, value_features, AdvantageSource,
    IterationStats, OptimizeConfig, OptimizeResult,
};
pub use value::{fit_value, fit_value_weighted, ValueEstimator, ValueFit, RIDGE_LAMBDA};

use crate::executor::ExecError;
use crate::policy::PolicyError;
use crate::trajectory::TrajectoryError;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("session tagged {found:?} was not sampled from checkpoint {expected}")]
    StaleBatch { expected: String, found: Option<String> },
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("session index {index} is outside 1..={n}")]
    InvalidIndex { index: usize, n: usize },
    #[error("parameters became non-finite")]
    NonFinite,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}
