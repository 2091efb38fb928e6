use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::data::rng::stream;
use crate::model::{predict, ModelParams};
use crate::spatial::{
    assemble_from_neighbors, neighbor_budget, precompute_neighbors, ContextPool, Neighbor, PointId,
    PointRecord, QueryPool,
};

/// Aggregated ensemble output for one query point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePrediction {
    pub id: PointId,
    /// Arithmetic mean of the member outputs.
    pub mean: f64,
    /// Sample standard deviation (denominator `M − 1`); exactly 0 when all
    /// members agree, including the one-member case.
    pub std: f64,
    /// Member outputs in member order.
    pub outputs: Vec<f64>,
}

impl EnsemblePrediction {
    pub fn from_outputs(id: PointId, outputs: Vec<f64>) -> Self {
        let m = outputs.len() as f64;
        if outputs.iter().all(|o| Some(o) == outputs.first()) {
            let mean = outputs.first().copied().unwrap_or(f64::NAN);
            return Self { id, mean, std: 0.0, outputs };
        }
        let mean = outputs.iter().sum::<f64>() / m;
        let std = if outputs.len() < 2 {
            0.0
        } else {
            (outputs.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
        };
        Self { id, mean, std, outputs }
    }

    pub fn members(&self) -> usize {
        self.outputs.len()
    }
}

/// How neighbor lists are obtained during inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    /// One tree query per query point, shared by all members.
    Precomputed,
    /// A fresh tree query per member and query point.
    OnTheFly,
}

impl CacheMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CacheMode::Precomputed => "precomputed",
            CacheMode::OnTheFly => "on_the_fly",
        }
    }
}

/// RNG seed of ensemble member `k`.
pub fn member_seed(seed: u64, k: usize) -> u64 {
    seed ^ k as u64
}

/// Neighbors to retrieve for `target` so that `len − 1` of them remain after
/// dropping the target itself.
pub(crate) fn budget_for(target: &PointRecord, context: &ContextPool, len: usize, expansion: f64) -> usize {
    neighbor_budget(len, expansion, context.contains(target.id))
}

/// The context sequence member `member` sees for `target`.
pub(crate) fn member_sequence(
    target: &PointRecord,
    neighbors: &[Neighbor],
    context: &ContextPool,
    len: usize,
    seed: u64,
    member: usize,
) -> Result<Vec<PointRecord>, PipelineError> {
    let mut rng = stream(member_seed(seed, member), target.id.0);
    Ok(assemble_from_neighbors(target, neighbors, context, len, &mut rng)?)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn run(
    params: &ModelParams,
    queries: &QueryPool,
    context: &ContextPool,
    len: usize,
    members: usize,
    expansion: f64,
    seed: u64,
    mode: CacheMode,
) -> Result<Vec<EnsemblePrediction>, PipelineError> {
    if members == 0 {
        return Err(PipelineError::Contract("ensemble needs at least one member".into()));
    }
    if !(expansion >= 1.0 && expansion.is_finite()) {
        return Err(PipelineError::Config(format!("expansion must be at least 1, got {expansion}")));
    }
    let cache = match mode {
        CacheMode::Precomputed => {
            let k = queries
                .points()
                .iter()
                .map(|q| budget_for(q, context, len, expansion))
                .max()
                .unwrap_or(0);
            Some(precompute_neighbors(queries, context, k))
        }
        CacheMode::OnTheFly => None,
    };
    queries
        .points()
        .par_iter()
        .map(|q| {
            let k = budget_for(q, context, len, expansion);
            let cached = match &cache {
                Some(c) => {
                    let entry = c.get(q.id).unwrap_or_default();
                    Some(&entry[..k.min(entry.len())])
                }
                None => None,
            };
            let outputs = (0..members)
                .map(|m| {
                    let fresh;
                    let nbrs = match cached {
                        Some(n) => n,
                        None => {
                            fresh = context.knn(q.u, q.v, k);
                            &fresh[..]
                        }
                    };
                    let seq = member_sequence(q, nbrs, context, len, seed, m)?;
                    Ok(predict(params, &seq)?)
                })
                .collect::<Result<Vec<f64>, PipelineError>>()?;
            Ok(EnsemblePrediction::from_outputs(q.id, outputs))
        })
        .collect()
}

/// `members` predictions per query, each from its own random context subset
/// of the `expansion`-enlarged neighbor list (member `k` draws with seed
/// `seed ⊕ k`), aggregated to mean and standard deviation. Sequences have
/// the model's training length; neighbor lists are retrieved once per query.
pub fn predict_ensemble(
    params: &ModelParams,
    queries: &QueryPool,
    context: &ContextPool,
    members: usize,
    expansion: f64,
    seed: u64,
) -> Result<Vec<EnsemblePrediction>, PipelineError> {
    let len = params.config().max_len;
    run(params, queries, context, len, members, expansion, seed, CacheMode::Precomputed)
}
