use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::ensemble::run;
use super::{CacheMode, PipelineError};
use crate::model::ModelParams;
use crate::spatial::{ContextPool, QueryPool};

/// Wall time of one ensemble inference pass over the whole query pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub length: usize,
    pub mode: CacheMode,
    pub seconds: f64,
    /// k-d tree queries issued during the pass.
    pub tree_queries: u64,
}

/// Times `members`-member inference over every query at each sequence
/// length in `lengths`, on a single worker thread, after one untimed
/// warm-up pass at the first length. The precomputed mode's time includes
/// building its neighbor cache.
pub fn benchmark_inference(
    params: &ModelParams,
    queries: &QueryPool,
    context: &ContextPool,
    lengths: &[usize],
    members: usize,
    expansion: f64,
    mode: CacheMode,
) -> Result<Vec<TimingRow>, PipelineError> {
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(PipelineError::Contract(format!("lengths must be strictly ascending: {lengths:?}")));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| PipelineError::Contract(format!("cannot build worker pool: {e}")))?;
    pool.install(|| {
        if let Some(&first) = lengths.first() {
            run(params, queries, context, first, members, expansion, 0, mode)?;
        }
        lengths
            .iter()
            .map(|&len| {
                context.tree().reset_query_count();
                let start = Instant::now();
                run(params, queries, context, len, members, expansion, 0, mode)?;
                let seconds = start.elapsed().as_secs_f64();
                Ok(TimingRow {
                    length: len,
                    mode,
                    seconds,
                    tree_queries: context.tree().query_count(),
                })
            })
            .collect()
    })
}
