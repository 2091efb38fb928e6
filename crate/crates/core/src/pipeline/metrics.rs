use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{EnsemblePrediction, PipelineError};
use crate::spatial::PointRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `1 − SSE/SST`, with `SST` taken about the mean of the truth.
    pub r2: f64,
    /// Mean absolute error in target units.
    pub mae: f64,
}

pub fn metrics(truth: &[f64], pred: &[f64]) -> Result<Metrics, PipelineError> {
    if truth.len() != pred.len() {
        return Err(PipelineError::Contract(format!(
            "{} truth values for {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    if truth.len() < 2 {
        return Err(PipelineError::UndefinedR2(format!("{} truth value(s)", truth.len())));
    }
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let sst: f64 = truth.iter().map(|y| (y - mean).powi(2)).sum();
    if sst == 0.0 {
        return Err(PipelineError::UndefinedR2("truth has zero variance".into()));
    }
    let sse: f64 = truth.iter().zip(pred).map(|(y, p)| (y - p).powi(2)).sum();
    let mae = truth.iter().zip(pred).map(|(y, p)| (y - p).abs()).sum::<f64>() / n;
    Ok(Metrics {
        r2: 1.0 - sse / sst,
        mae,
    })
}

/// Scores ensemble means against the targets of `truth`, matched by id.
pub fn evaluate(pred: &[EnsemblePrediction], truth: &[PointRecord]) -> Result<Metrics, PipelineError> {
    let by_id: HashMap<_, _> = truth.iter().map(|r| (r.id, r.y)).collect();
    let mut y = Vec::with_capacity(pred.len());
    for p in pred {
        match by_id.get(&p.id) {
            Some(Some(v)) => y.push(*v),
            _ => return Err(PipelineError::MissingTruth(p.id)),
        }
    }
    let yhat: Vec<f64> = pred.iter().map(|p| p.mean).collect();
    metrics(&y, &yhat)
}
