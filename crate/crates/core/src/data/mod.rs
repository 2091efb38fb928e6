//! Datasets, generators, and the CSV + sidecar-JSON file format.

mod io;
pub mod rng;
pub mod synthetic;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{load_csv, meta_path, save_csv, write_csv};
pub use synthetic::{
    generate_gwr, generate_sl, gwr_beta1, gwr_beta2, morans_i, solve_spatial_lag, SpatialWeights,
};

use crate::spatial::{PointRecord, SpatialError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: header is missing required column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: bad header: {message}")]
    BadHeader { path: PathBuf, message: String },
    #[error("{path}:{line}: column `{column}`: cannot parse {value:?} as a number")]
    BadCell {
        path: PathBuf,
        line: u64,
        column: String,
        value: String,
    },
    #[error("{path}:{line}: expected {expected} fields, found {found}")]
    RowLength {
        path: PathBuf,
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("solver failed: {0}")]
    Solver(String),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
}

/// Provenance written to the sidecar JSON next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    pub params: BTreeMap<String, f64>,
}

/// Id-keyed rows of coordinates, covariates, and (optionally) targets.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoDataset {
    points: Vec<PointRecord>,
    meta: Option<DatasetMeta>,
}

impl GeoDataset {
    pub fn new(points: Vec<PointRecord>, meta: Option<DatasetMeta>) -> Self {
        Self { points, meta }
    }

    pub fn points(&self) -> &[PointRecord] {
        &self.points
    }

    pub fn into_points(self) -> Vec<PointRecord> {
        self.points
    }

    pub fn meta(&self) -> Option<&DatasetMeta> {
        self.meta.as_ref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.points.first().map_or(0, |p| p.x.len())
    }

    pub fn has_targets(&self) -> bool {
        !self.points.is_empty() && self.points.iter().all(|p| p.y.is_some())
    }
}
