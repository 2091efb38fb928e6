use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{PipelineError, TrainedModel};
use crate::data::rng::{seeded, splitmix64, stream};
use crate::model::{loss_and_grad, ModelConfig, ModelInput, ModelParams, Normalizer};
use crate::numerics::{adam_step, AdamConfig, AdamState};
use crate::spatial::{
    assemble_sequence, neighbor_budget, precompute_neighbors, ContextPool, PointRecord, QueryPool,
};

/// Optimisation and data-handling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Sequences per Adam step.
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Neighbor over-retrieval factor (≥ 1) that makes context subsets random.
    pub expansion: f64,
    /// Fraction of rows used for training; the rest form the test split.
    pub split: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 32,
            lr: 1e-3,
            seed: 0,
            expansion: 1.25,
            split: 0.7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: String| Err(PipelineError::Config(m));
        if self.batch == 0 {
            return fail("batch must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.expansion >= 1.0 && self.expansion.is_finite()) {
            return fail(format!("expansion must be at least 1, got {}", self.expansion));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return fail(format!("split must lie in (0, 1), got {}", self.split));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean minibatch MSE of each epoch, in squared target units.
    pub loss_history: Vec<f64>,
}

/// Seeded shuffle of `points` into `(train, test)` with `round(split · n)`
/// training rows. Both parts keep the input order.
pub fn split_dataset(
    points: &[PointRecord],
    split: f64,
    seed: u64,
) -> Result<(Vec<PointRecord>, Vec<PointRecord>), PipelineError> {
    if !(split > 0.0 && split < 1.0) {
        return Err(PipelineError::Config(format!("split must lie in (0, 1), got {split}")));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(&mut seeded(seed));
    let n_train = (split * points.len() as f64).round() as usize;
    let mut is_train = vec![false; points.len()];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let (train, test): (Vec<_>, Vec<_>) = points.iter().cloned().zip(is_train).partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|(p, _)| p).collect(),
        test.into_iter().map(|(p, _)| p).collect(),
    ))
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ splitmix64(0x7261_696e ^ epoch as u64)
}

/// Trains a fresh model on `points`, which serve both as targets and as the
/// context pool. Each epoch visits every point once in a seeded random
/// order; every visit draws a new random context subset from the cached
/// neighbor list.
pub fn train(
    points: &[PointRecord],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, PipelineError> {
    cfg.validate()?;
    model.validate()?;
    let len = model.max_len;
    let k = neighbor_budget(len, cfg.expansion, true);
    if points.len() < k {
        return Err(PipelineError::Contract(format!(
            "training set has {} points, sequences of length {len} with expansion {} need {k}",
            points.len(),
            cfg.expansion
        )));
    }
    if let Some(bad) = points.iter().find(|p| p.y.is_none()) {
        return Err(PipelineError::Contract(format!("training point {} has no target", bad.id)));
    }
    let p = points[0].x.len();
    let normalizer = Normalizer::fit(points)?;
    let mut params = ModelParams::init(model, p, normalizer.clone(), cfg.seed)?;
    let context = ContextPool::new(points.to_vec())?;
    let cache = precompute_neighbors(&QueryPool::new(points.to_vec())?, &context, k);

    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(params.tensors());
    let mut order: Vec<usize> = (0..points.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let es = epoch_seed(cfg.seed, epoch);
        order.shuffle(&mut seeded(es));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let t = &points[i];
                    let seq = assemble_sequence(t, &cache, &context, len, &mut stream(es, t.id.0))?;
                    let target = normalizer.y(t.y.unwrap_or_default());
                    Ok((ModelInput::from_sequence(&seq, &params)?, target))
                })
                .collect::<Result<Vec<_>, PipelineError>>()?;
            let (loss, grads) = loss_and_grad(&params, &batch)?;
            adam_step(params.tensors_mut(), &grads, &mut adam, &adam_cfg)?;
            total += loss * chunk.len() as f64;
        }
        history.push(total / points.len() as f64 * normalizer.y_std * normalizer.y_std);
    }
    Ok(TrainOutcome {
        params,
        loss_history: history,
    })
}

/// Splits `points`, trains on the training part, and bundles the result
/// with its context pool. Returns the bundle, the loss history, and the
/// held-out test rows.
pub fn fit(
    points: &[PointRecord],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, Vec<f64>, Vec<PointRecord>), PipelineError> {
    cfg.validate()?;
    let (train_rows, test_rows) = split_dataset(points, cfg.split, cfg.seed)?;
    let outcome = train(&train_rows, model, cfg)?;
    let bundle = TrainedModel::new(outcome.params, train_rows, cfg.clone())?;
    Ok((bundle, outcome.loss_history, test_rows))
}
