use super::ExplainError;
use crate::model::{predict, ModelParams};
use crate::pipeline::{ensemble, TrainedModel};
use crate::spatial::{precompute_neighbors, ContextPool, NeighborCache, PointId, PointRecord, QueryPool};

/// Anything that maps a (possibly perturbed) row to a prediction.
pub trait Predictor: Sync {
    fn predict(&self, row: &PointRecord) -> Result<f64, ExplainError>;
}

/// Adapts a plain function of the row.
pub struct FnPredictor<F>(pub F);

impl<F: Fn(&PointRecord) -> f64 + Sync> Predictor for FnPredictor<F> {
    fn predict(&self, row: &PointRecord) -> Result<f64, ExplainError> {
        Ok((self.0)(row))
    }
}

/// Wraps a trained network for explanation. Context sequences come from
/// the true neighbors of the row's id, looked up in a cache built once for
/// the known rows; the row's own coordinates and covariates only reach the
/// model as the target token (its features, rotary position, and distance
/// bias).
pub struct ShapPredictor<'a> {
    params: &'a ModelParams,
    context: ContextPool,
    cache: NeighborCache,
    len: usize,
    expansion: f64,
    seed: u64,
    members: usize,
}

/// Builds the id-based predictor for `rows` (every row that may later be
/// explained or used as an instance). With `members = 1` it reproduces a
/// one-member ensemble prediction with the same seed and expansion.
pub fn make_shap_predictor<'a>(
    model: &'a TrainedModel,
    rows: &[PointRecord],
    expansion: f64,
    seed: u64,
    members: usize,
) -> Result<ShapPredictor<'a>, ExplainError> {
    if members == 0 {
        return Err(ExplainError::Contract("predictor needs at least one member".into()));
    }
    let params = model.params();
    let context = model.context_pool()?;
    let len = params.config().max_len;
    let queries = QueryPool::new(rows.to_vec())?;
    let k = rows
        .iter()
        .map(|r| ensemble::budget_for(r, &context, len, expansion))
        .max()
        .unwrap_or(0);
    let cache = precompute_neighbors(&queries, &context, k);
    Ok(ShapPredictor {
        params,
        context,
        cache,
        len,
        expansion,
        seed,
        members,
    })
}

impl ShapPredictor<'_> {
    fn sequence(&self, row: &PointRecord, member: usize) -> Result<Vec<PointRecord>, ExplainError> {
        let entry = self.cache.get(row.id).ok_or(ExplainError::UnknownId(row.id))?;
        let k = ensemble::budget_for(row, &self.context, self.len, self.expansion);
        let nbrs = &entry[..k.min(entry.len())];
        Ok(ensemble::member_sequence(row, nbrs, &self.context, self.len, self.seed, member)?)
    }

    /// Ids of the context tokens the first member feeds the model for `row`.
    pub fn neighbor_ids(&self, row: &PointRecord) -> Result<Vec<PointId>, ExplainError> {
        Ok(self.sequence(row, 0)?[1..].iter().map(|r| r.id).collect())
    }
}

impl Predictor for ShapPredictor<'_> {
    fn predict(&self, row: &PointRecord) -> Result<f64, ExplainError> {
        let mut total = 0.0;
        for m in 0..self.members {
            total += predict(self.params, &self.sequence(row, m)?)?;
        }
        Ok(total / self.members as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_gwr;
    use crate::model::{ModelConfig, Normalizer};
    use crate::pipeline::{predict_ensemble, split_dataset, TrainConfig};

    fn model() -> (TrainedModel, Vec<PointRecord>) {
        let ds = generate_gwr(400, 3).unwrap();
        let (train, test) = split_dataset(ds.points(), 0.7, 0).unwrap();
        let cfg = ModelConfig { max_len: 16, ..Default::default() };
        let params = ModelParams::init(&cfg, 2, Normalizer::fit(&train).unwrap(), 2).unwrap();
        (TrainedModel::new(params, train, TrainConfig::default()).unwrap(), test)
    }

    #[test]
    fn unperturbed_rows_match_single_member_inference() {
        let (m, test) = model();
        let rows = &test[..20];
        let pred = make_shap_predictor(&m, rows, 1.25, 9, 1).unwrap();
        let ctx = m.context_pool().unwrap();
        let ens = predict_ensemble(m.params(), &QueryPool::new(rows.to_vec()).unwrap(), &ctx, 1, 1.25, 9).unwrap();
        for (r, e) in rows.iter().zip(&ens) {
            assert_eq!(pred.predict(r).unwrap(), e.mean);
        }
    }

    #[test]
    fn perturbations_keep_the_neighbor_set() {
        let (m, test) = model();
        let pred = make_shap_predictor(&m, &test, 1.25, 1, 1).unwrap();
        let row = &test[5];
        let base = pred.neighbor_ids(row).unwrap();
        let features = PointRecord { x: vec![9.0, -9.0], ..row.clone() };
        let moved = PointRecord { u: 1.0 - row.u, v: 0.0, ..row.clone() };
        assert_eq!(pred.neighbor_ids(&features).unwrap(), base);
        assert_eq!(pred.neighbor_ids(&moved).unwrap(), base);
        assert_ne!(pred.predict(&moved).unwrap(), pred.predict(row).unwrap());
    }

    #[test]
    fn unknown_id_is_an_error() {
        let (m, test) = model();
        let pred = make_shap_predictor(&m, &test[..3], 1.25, 1, 1).unwrap();
        let stranger = PointRecord { id: PointId(99_999), ..test[0].clone() };
        assert!(matches!(pred.predict(&stranger), Err(ExplainError::UnknownId(_))));
    }
}
