//! Shared fixtures for the criterion benchmarks.

use geoagg::data::generate_gwr;
use geoagg::model::{ModelConfig, ModelParams, Normalizer};
use geoagg::pipeline::split_dataset;
use geoagg::spatial::{ContextPool, QueryPool};

pub struct Fixture {
    pub params: ModelParams,
    pub context: ContextPool,
    pub queries: QueryPool,
}

/// Freshly initialised default-size model over a GWR-r split of `n`
/// points. Timing does not depend on the weights having been trained.
pub fn fixture(n: usize, n_queries: usize) -> Fixture {
    let ds = generate_gwr(n, 42).expect("square point count");
    let (train, test) = split_dataset(ds.points(), 0.7, 0).expect("valid split");
    let normalizer = Normalizer::fit(&train).expect("non-empty training set");
    let params = ModelParams::init(&ModelConfig::default(), 2, normalizer, 0).expect("default config is valid");
    Fixture {
        params,
        context: ContextPool::new(train).expect("unique ids"),
        queries: QueryPool::new(test.into_iter().take(n_queries).collect()).expect("unique ids"),
    }
}
