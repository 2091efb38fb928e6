//! The network: covariate embedding, 2-D rotary encoding, distance-biased
//! multi-head attention with one bias factor per head, induced-point
//! aggregation, and a regression head.

mod attention;
mod config;
mod forward;
mod params;

pub use attention::{biased_attention, AttentionTrace};
pub use config::ModelConfig;
pub use forward::{
    forward, gradient_check, induced_block, loss_and_grad, predict, predict_normalized, ForwardOutput,
    ModelInput,
};
pub use params::{ModelParams, Normalizer, FORMAT_NAME, FORMAT_VERSION};
pub(crate) use params::ParamsFile;

use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("model expects {expected} covariates, row {id} has {found}")]
    CovariateMismatch { id: u64, expected: usize, found: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
