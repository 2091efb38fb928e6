use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PipelineError, TrainConfig};
use crate::model::{ModelParams, ParamsFile};
use crate::spatial::{ContextPool, PointRecord};

const BUNDLE_FORMAT: &str = "geoagg-model";
const BUNDLE_VERSION: u32 = 1;

/// A trained network together with the context pool it was trained on,
/// which later inference and explanation draw neighbors from.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    params: ModelParams,
    context: Vec<PointRecord>,
    train: TrainConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleFile {
    format: String,
    format_version: u32,
    train_config: TrainConfig,
    params: ParamsFile,
    context: Vec<PointRecord>,
}

impl TrainedModel {
    pub fn new(params: ModelParams, context: Vec<PointRecord>, train: TrainConfig) -> Result<Self, PipelineError> {
        if context.is_empty() {
            return Err(PipelineError::Contract("context pool is empty".into()));
        }
        if let Some(bad) = context
            .iter()
            .find(|r| r.y.is_none() || r.x.len() != params.n_covariates())
        {
            return Err(PipelineError::Contract(format!(
                "context point {} lacks a target or has {} covariates (model expects {})",
                bad.id,
                bad.x.len(),
                params.n_covariates()
            )));
        }
        Ok(Self { params, context, train })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn context_points(&self) -> &[PointRecord] {
        &self.context
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train
    }

    /// Builds the indexed context pool.
    pub fn context_pool(&self) -> Result<ContextPool, PipelineError> {
        Ok(ContextPool::new(self.context.clone())?)
    }

    pub fn to_json(&self) -> String {
        let file = BundleFile {
            format: BUNDLE_FORMAT.into(),
            format_version: BUNDLE_VERSION,
            train_config: self.train.clone(),
            params: self.params.to_file(),
            context: self.context.clone(),
        };
        serde_json::to_string(&file).expect("model bundle serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let file: BundleFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if file.format != BUNDLE_FORMAT || file.format_version != BUNDLE_VERSION {
            return Err(format!(
                "expected {BUNDLE_FORMAT} v{BUNDLE_VERSION}, found {} v{}",
                file.format, file.format_version
            ));
        }
        let params = ModelParams::from_file(file.params).map_err(|e| e.to_string())?;
        Self::new(params, file.context, file.train_config).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        fs::write(path, self.to_json() + "\n").map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text).map_err(|message| PipelineError::Format {
            path: path.to_path_buf(),
            message,
        })
    }
}
