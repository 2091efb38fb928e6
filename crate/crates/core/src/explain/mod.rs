//! GeoShapley explanations: location as one joint player next to the
//! covariates, exact coalition enumeration, location–feature interaction
//! effects, and local coefficients recovered from them.

mod predictor;
mod shapley;

pub use predictor::{make_shap_predictor, FnPredictor, Predictor, ShapPredictor};
pub use shapley::{interaction_index, kernel_shap_exact, shapley_exact, MAX_EXACT_PLAYERS};

use std::io::Write;

use rand::seq::index::sample;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::rng::seeded;
use crate::model::ModelError;
use crate::pipeline::PipelineError;
use crate::spatial::{PointId, PointRecord, SpatialError};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("{0} players exceed exact enumeration (at most {MAX_EXACT_PLAYERS}); use a sampling estimator")]
    TooManyPlayers(usize),
    #[error("background set is empty")]
    EmptyBackground,
    #[error("point {0} is unknown to the predictor")]
    UnknownId(PointId),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
}

/// Bit of the joint location player in a coalition mask; feature `j`
/// (0-based) uses bit `j + 1`.
pub const GEO: usize = 0;

/// The row that coalition `mask` produces from `instance` and one
/// background row: present players keep the instance's values, absent ones
/// take the background's (location as a `(u, v)` pair). The id is always
/// the instance's.
pub fn substitute(instance: &PointRecord, background: &PointRecord, mask: usize) -> PointRecord {
    let (u, v) = if mask & 1 != 0 {
        (instance.u, instance.v)
    } else {
        (background.u, background.v)
    };
    let x = instance
        .x
        .iter()
        .zip(&background.x)
        .enumerate()
        .map(|(j, (a, b))| if mask & (1 << (j + 1)) != 0 { *a } else { *b })
        .collect();
    PointRecord {
        id: instance.id,
        u,
        v,
        x,
        y: None,
    }
}

/// Mean prediction over `background` with the players in `mask` fixed to
/// the instance.
pub fn coalition_value<P: Predictor + ?Sized>(
    predictor: &P,
    instance: &PointRecord,
    mask: usize,
    background: &[PointRecord],
) -> Result<f64, ExplainError> {
    if background.is_empty() {
        return Err(ExplainError::EmptyBackground);
    }
    let mut total = 0.0;
    for b in background {
        total += predictor.predict(&substitute(instance, b, mask))?;
    }
    Ok(total / background.len() as f64)
}

fn check_schema(instances: &[PointRecord], background: &[PointRecord]) -> Result<usize, ExplainError> {
    let p = background.first().ok_or(ExplainError::EmptyBackground)?.x.len();
    if let Some(bad) = instances.iter().chain(background).find(|r| r.x.len() != p) {
        return Err(ExplainError::Contract(format!(
            "row {} has {} covariates, expected {p}",
            bad.id,
            bad.x.len()
        )));
    }
    if p + 1 > MAX_EXACT_PLAYERS {
        return Err(ExplainError::TooManyPlayers(p + 1));
    }
    Ok(p)
}

/// GeoShapley decomposition of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoShapleyRow {
    pub id: PointId,
    /// Value of the empty coalition.
    pub phi0: f64,
    pub phi_geo: f64,
    pub phi: Vec<f64>,
    /// Location–feature interaction effects.
    pub phi_geo_x: Vec<f64>,
    /// Prediction on the instance itself.
    pub prediction: f64,
}

impl GeoShapleyRow {
    /// `phi0 + phi_geo + Σ phi + Σ phi_geo_x − prediction`.
    pub fn residual(&self) -> f64 {
        self.phi0 + self.phi_geo + self.phi.iter().sum::<f64>() + self.phi_geo_x.iter().sum::<f64>()
            - self.prediction
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoShapleyResult {
    pub rows: Vec<GeoShapleyRow>,
}

/// Splits exact Shapley values of the `p + 1` players into the four
/// GeoShapley components, halving each location–feature interaction
/// between the two main effects.
pub fn decompose(values: &[f64], p: usize, id: PointId) -> Result<GeoShapleyRow, ExplainError> {
    let m = p + 1;
    let shap = shapley_exact(values, m)?;
    let sii = (1..m)
        .map(|j| interaction_index(values, m, GEO, j))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(GeoShapleyRow {
        id,
        phi0: values[0],
        phi_geo: shap[GEO] - sii.iter().sum::<f64>() / 2.0,
        phi: (0..p).map(|j| shap[j + 1] - sii[j] / 2.0).collect(),
        phi_geo_x: sii,
        prediction: values[(1 << m) - 1],
    })
}

/// Explains every instance against `background` by enumerating all
/// `2^(p+1)` coalitions.
pub fn geoshapley_explain<P: Predictor + ?Sized>(
    predictor: &P,
    instances: &[PointRecord],
    background: &[PointRecord],
) -> Result<GeoShapleyResult, ExplainError> {
    let p = check_schema(instances, background)?;
    let m = p + 1;
    let full = (1usize << m) - 1;
    let rows = instances
        .par_iter()
        .map(|inst| {
            let mut values = vec![0.0; 1 << m];
            for (mask, v) in values.iter_mut().enumerate().take(full) {
                *v = coalition_value(predictor, inst, mask, background)?;
            }
            values[full] = predictor.predict(&substitute(inst, inst, full))?;
            decompose(&values, p, inst.id)
        })
        .collect::<Result<Vec<_>, ExplainError>>()?;
    Ok(GeoShapleyResult { rows })
}

/// Local coefficient estimates `β̂_j = (phi_j + phi_geo_j) / (x_j − x̄_j)`
/// with `x̄_j` the background mean. Entries where `|x_j − x̄_j|` is below
/// `1e-3` background standard deviations are `None`.
pub fn local_coefficients(
    result: &GeoShapleyResult,
    instances: &[PointRecord],
    background: &[PointRecord],
) -> Result<Vec<Vec<Option<f64>>>, ExplainError> {
    let p = check_schema(instances, background)?;
    if result.rows.len() != instances.len() {
        return Err(ExplainError::Contract(format!(
            "{} explained rows for {} instances",
            result.rows.len(),
            instances.len()
        )));
    }
    let n = background.len() as f64;
    let mean: Vec<f64> = (0..p).map(|j| background.iter().map(|b| b.x[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..p)
        .map(|j| (background.iter().map(|b| (b.x[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    Ok(result
        .rows
        .iter()
        .zip(instances)
        .map(|(row, inst)| {
            (0..p)
                .map(|j| {
                    let dx = inst.x[j] - mean[j];
                    (dx != 0.0 && dx.abs() >= 1e-3 * sd[j]).then(|| (row.phi[j] + row.phi_geo_x[j]) / dx)
                })
                .collect()
        })
        .collect())
}

/// `n` distinct rows drawn uniformly at random, in their original order.
pub fn sample_background(points: &[PointRecord], n: usize, seed: u64) -> Vec<PointRecord> {
    let n = n.min(points.len());
    let mut idx = sample(&mut seeded(seed), points.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i].clone()).collect()
}

/// `id,phi0,phi_geo,phi_x1..,phi_geo_x1..,beta_hat_x1..`; missing
/// coefficients are empty cells.
pub fn write_explanations<W: Write>(
    out: W,
    result: &GeoShapleyResult,
    coefficients: &[Vec<Option<f64>>],
) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(out);
    let p = result.rows.first().map_or(0, |r| r.phi.len());
    let mut header = vec!["id".to_string(), "phi0".into(), "phi_geo".into()];
    header.extend((1..=p).map(|j| format!("phi_x{j}")));
    header.extend((1..=p).map(|j| format!("phi_geo_x{j}")));
    header.extend((1..=p).map(|j| format!("beta_hat_x{j}")));
    writeln!(w, "{}", header.join(","))?;
    for (row, beta) in result.rows.iter().zip(coefficients) {
        write!(w, "{},{},{}", row.id, row.phi0, row.phi_geo)?;
        for v in row.phi.iter().chain(&row.phi_geo_x) {
            write!(w, ",{v}")?;
        }
        for b in beta {
            match b {
                Some(b) => write!(w, ",{b}")?,
                None => write!(w, ",")?,
            }
        }
        writeln!(w)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_gwr, gwr_beta1, gwr_beta2};
    use proptest::prelude::*;

    fn rec(id: u64, u: f64, v: f64, x: Vec<f64>) -> PointRecord {
        PointRecord { id: PointId(id), u, v, x, y: None }
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn linear_model_example() {
        let f = FnPredictor(|r: &PointRecord| 2.0 * r.x[0] + 3.0 * r.x[1]);
        let res = geoshapley_explain(&f, &[rec(0, 0.3, 0.4, vec![1.0, 1.0])], &[rec(1, 0.0, 0.0, vec![0.0, 0.0])]).unwrap();
        let r = &res.rows[0];
        assert!((r.phi[0] - 2.0).abs() < 1e-10 && (r.phi[1] - 3.0).abs() < 1e-10);
        assert!(r.phi0.abs() < 1e-12 && r.phi_geo.abs() < 1e-12);
    }

    #[test]
    fn pure_interaction_example() {
        let f = FnPredictor(|r: &PointRecord| r.u * r.x[0]);
        let res = geoshapley_explain(&f, &[rec(0, 1.0, 0.0, vec![1.0])], &[rec(1, 0.0, 0.0, vec![0.0])]).unwrap();
        let r = &res.rows[0];
        assert!(r.phi_geo.abs() < 1e-10 && r.phi[0].abs() < 1e-10);
        assert!((r.phi_geo_x[0] - 1.0).abs() < 1e-10);
        assert!(r.residual().abs() < 1e-12);
    }

    #[test]
    fn coalition_value_edges() {
        let f = FnPredictor(|r: &PointRecord| r.x[0] + r.u);
        let inst = rec(0, 1.0, 1.0, vec![5.0]);
        let bg = vec![rec(1, 0.0, 0.0, vec![1.0]), rec(2, 2.0, 0.0, vec![3.0])];
        assert_eq!(coalition_value(&f, &inst, 0b11, &bg).unwrap(), 6.0);
        assert_eq!(coalition_value(&f, &inst, 0, &bg).unwrap(), 3.0);
        let c = FnPredictor(|_: &PointRecord| 4.5);
        for mask in 0..4 {
            assert_eq!(coalition_value(&c, &inst, mask, &bg).unwrap(), 4.5);
        }
        assert!(matches!(coalition_value(&f, &inst, 0, &[]), Err(ExplainError::EmptyBackground)));
    }

    #[test]
    fn location_moves_as_a_pair() {
        let inst = rec(0, 1.0, 2.0, vec![0.0]);
        let bg = rec(1, 3.0, 4.0, vec![1.0]);
        let r = substitute(&inst, &bg, 0b10);
        assert_eq!((r.u, r.v, r.x[0], r.id), (3.0, 4.0, 0.0, PointId(0)));
    }

    #[test]
    fn global_linear_coefficients_are_exact() {
        let f = FnPredictor(|r: &PointRecord| 1.5 * r.x[0] - 0.5 * r.x[1] + 2.0);
        let ds = generate_gwr(100, 1).unwrap();
        let bg = sample_background(ds.points(), 30, 2);
        let inst = &ds.points()[..20];
        let res = geoshapley_explain(&f, inst, &bg).unwrap();
        let beta = local_coefficients(&res, inst, &bg).unwrap();
        for row in &beta {
            for (b, want) in row.iter().zip([1.5, -0.5]) {
                assert!((b.unwrap() - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn instance_at_the_background_mean_is_missing() {
        let f = FnPredictor(|r: &PointRecord| r.x[0]);
        let bg = vec![rec(1, 0.0, 0.0, vec![1.0]), rec(2, 0.0, 0.0, vec![3.0])];
        let inst = vec![rec(0, 0.0, 0.0, vec![2.0])];
        let res = geoshapley_explain(&f, &inst, &bg).unwrap();
        assert_eq!(local_coefficients(&res, &inst, &bg).unwrap(), vec![vec![None]]);
    }

    #[test]
    fn true_surfaces_are_recovered_from_the_oracle() {
        let ds = generate_gwr(900, 4).unwrap();
        let f = FnPredictor(|r: &PointRecord| gwr_beta1(r.u, r.v) * r.x[0] + gwr_beta2(r.u, r.v) * r.x[1]);
        let bg = sample_background(ds.points(), 30, 1);
        let inst = &ds.points()[..300];
        let res = geoshapley_explain(&f, inst, &bg).unwrap();
        let beta = local_coefficients(&res, inst, &bg).unwrap();
        for (j, truth) in [gwr_beta1 as fn(f64, f64) -> f64, gwr_beta2].iter().enumerate() {
            let (est, tru): (Vec<f64>, Vec<f64>) = beta
                .iter()
                .zip(inst)
                .filter_map(|(b, r)| b[j].map(|v| (v, truth(r.u, r.v))))
                .unzip();
            let r = pearson(&est, &tru);
            assert!(r >= 0.9, "coefficient {j}: r = {r}");
        }
    }

    #[test]
    fn output_csv_layout() {
        let row = GeoShapleyRow { id: PointId(3), phi0: 1.0, phi_geo: 0.5, phi: vec![0.25], phi_geo_x: vec![0.0], prediction: 1.75 };
        let mut buf = Vec::new();
        write_explanations(&mut buf, &GeoShapleyResult { rows: vec![row] }, &[vec![None]]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "id,phi0,phi_geo,phi_x1,phi_geo_x1,beta_hat_x1\n3,1,0.5,0.25,0,\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn components_add_up(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let f = FnPredictor(move |r: &PointRecord| a * r.u * r.x[0] + b * r.x[1].sin() + r.v * r.x[1] * r.x[2] + r.u.exp());
            let mut rng = seeded(seed);
            let pts: Vec<PointRecord> = (0..12)
                .map(|i| rec(i, rand::Rng::random(&mut rng), rand::Rng::random(&mut rng), (0..3).map(|_| rand::Rng::random::<f64>(&mut rng)).collect()))
                .collect();
            let res = geoshapley_explain(&f, &pts[..4], &pts[4..]).unwrap();
            for row in &res.rows {
                prop_assert!(row.residual().abs() < 1e-9);
            }
        }

        #[test]
        fn ignored_players_get_nothing(seed in any::<u64>()) {
            let f = FnPredictor(|r: &PointRecord| 3.0 * r.x[0] * r.x[0] - r.x[1]);
            let mut rng = seeded(seed);
            let pts: Vec<PointRecord> = (0..10)
                .map(|i| rec(i, rand::Rng::random(&mut rng), rand::Rng::random(&mut rng), (0..3).map(|_| rand::Rng::random::<f64>(&mut rng)).collect()))
                .collect();
            let res = geoshapley_explain(&f, &pts[..3], &pts[3..]).unwrap();
            for row in &res.rows {
                prop_assert!(row.phi_geo.abs() < 1e-8);
                prop_assert!(row.phi[2].abs() < 1e-8);
                prop_assert!(row.phi_geo_x.iter().all(|v| v.abs() < 1e-8));
            }
        }

        #[test]
        fn split_redistributes_without_creating(raw in prop::collection::vec(-5.0f64..5.0, 16)) {
            let row = decompose(&raw, 3, PointId(0)).unwrap();
            let shap: f64 = shapley_exact(&raw, 4).unwrap().iter().sum();
            let parts = row.phi_geo + row.phi.iter().sum::<f64>() + row.phi_geo_x.iter().sum::<f64>();
            prop_assert!((parts - shap).abs() < 1e-9);
        }
    }
}
