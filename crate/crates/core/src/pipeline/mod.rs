//! Training loop, ensemble inference with randomised context subsampling,
//! accuracy metrics, the cache-versus-query benchmark, and the persisted
//! model bundle.

mod baseline;
mod bench;
mod bundle;
pub(crate) mod ensemble;
mod io;
mod metrics;
mod train;

pub use baseline::{fit_ols, ols_predict};
pub use bench::{benchmark_inference, TimingRow};
pub use bundle::TrainedModel;
pub use ensemble::{member_seed, predict_ensemble, CacheMode, EnsemblePrediction};
pub use io::{write_loss_history, write_predictions, write_timings};
pub use metrics::{evaluate, metrics, Metrics};
pub use train::{fit, split_dataset, train, TrainConfig, TrainOutcome};

use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::model::ModelError;
use crate::numerics::NumericsError;
use crate::spatial::{PointId, SpatialError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("R² is undefined: {0}")]
    UndefinedR2(String),
    #[error("no ground truth for point {0}")]
    MissingTruth(PointId),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
