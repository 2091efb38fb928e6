//! Reproducible synthetic datasets.
//!
//! * GWR-r: a regular grid on the unit square with two spatially varying
//!   coefficients, `y = β₁(u,v)·x₁ + β₂(u,v)·x₂ + ε`.
//! * SL-r: uniformly scattered points following a spatial lag process,
//!   `y = ρWy + Xβ + ε` with `W` the row-standardised 8-nearest-neighbor
//!   adjacency.
//!
//! Both are pure functions of their arguments.

use std::collections::BTreeMap;

use super::rng::{seeded, standard_normal, uniform};
use super::{DataError, DatasetMeta, GeoDataset};
use crate::spatial::{KdTree, PointId, PointRecord};

pub const GWR_NOISE_SD: f64 = 0.25;
pub const SL_NOISE_SD: f64 = 0.5;
pub const SL_BETA: [f64; 2] = [2.0, 3.0];
pub const SL_NEIGHBORS: usize = 8;

/// Linear ramp from 0 at the origin to 3 at `(1, 1)`.
pub fn gwr_beta1(u: f64, v: f64) -> f64 {
    1.5 * (u + v)
}

/// Gaussian bump peaking at 3 in the centre of the unit square.
pub fn gwr_beta2(u: f64, v: f64) -> f64 {
    1.0 + 2.0 * (-((u - 0.5).powi(2) + (v - 0.5).powi(2)) / 0.1).exp()
}

/// GWR-r on a `√n × √n` grid of cell centres. Ids follow row-major grid
/// order; per point the draws are `x₁`, `x₂`, then `ε`.
pub fn generate_gwr(n: usize, seed: u64) -> Result<GeoDataset, DataError> {
    let side = (n as f64).sqrt().round() as usize;
    if n < 100 || side * side != n {
        return Err(DataError::Contract(format!(
            "gwr-r needs a perfect square n >= 100, got {n}"
        )));
    }
    let mut rng = seeded(seed);
    let mut points = Vec::with_capacity(n);
    for row in 0..side {
        for col in 0..side {
            let u = (col as f64 + 0.5) / side as f64;
            let v = (row as f64 + 0.5) / side as f64;
            let x1 = standard_normal(&mut rng);
            let x2 = standard_normal(&mut rng);
            let eps = GWR_NOISE_SD * standard_normal(&mut rng);
            let y = gwr_beta1(u, v) * x1 + gwr_beta2(u, v) * x2 + eps;
            points.push(PointRecord {
                id: PointId((row * side + col) as u64),
                u,
                v,
                x: vec![x1, x2],
                y: Some(y),
            });
        }
    }
    let params = BTreeMap::from([
        ("n".to_string(), n as f64),
        ("noise_sd".to_string(), GWR_NOISE_SD),
    ]);
    Ok(GeoDataset::new(
        points,
        Some(DatasetMeta {
            generator: "gwr-r".into(),
            seed,
            params,
        }),
    ))
}

/// Row-standardised k-nearest-neighbor weights; each row holds `k`
/// neighbors of weight `1/k`, the point itself excluded.
#[derive(Debug, Clone)]
pub struct SpatialWeights {
    neighbors: Vec<Vec<usize>>,
}

impl SpatialWeights {
    pub fn knn(points: &[PointRecord], k: usize) -> Result<Self, DataError> {
        let coords: Vec<(f64, f64)> = points.iter().map(|p| (p.u, p.v)).collect();
        let ids: Vec<PointId> = (0..points.len() as u64).map(PointId).collect();
        let tree = KdTree::build(&coords, &ids)?;
        let neighbors = coords
            .iter()
            .enumerate()
            .map(|(i, &(u, v))| {
                tree.knn(u, v, k + 1)
                    .into_iter()
                    .filter(|n| n.index != i)
                    .take(k)
                    .map(|n| n.index)
                    .collect()
            })
            .collect();
        Ok(Self { neighbors })
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// `(W·z)_i`.
    pub fn lag(&self, z: &[f64]) -> Vec<f64> {
        self.neighbors
            .iter()
            .map(|nb| nb.iter().map(|&j| z[j]).sum::<f64>() / nb.len() as f64)
            .collect()
    }

    pub fn total_weight(&self) -> f64 {
        self.neighbors.iter().filter(|nb| !nb.is_empty()).count() as f64
    }
}

/// Global Moran's I of `values` under `w`, on centred values.
pub fn morans_i(values: &[f64], w: &SpatialWeights) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let z: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let wz = w.lag(&z);
    let num: f64 = z.iter().zip(&wz).map(|(a, b)| a * b).sum();
    let den: f64 = z.iter().map(|a| a * a).sum();
    (n / w.total_weight()) * num / den
}

const SOLVE_TOL: f64 = 1e-10;
const SOLVE_MAX_ITER: usize = 10_000;

/// Solves `(I − ρW)y = b` by the fixed-point iteration `y ← b + ρWy`, which
/// contracts for `|ρ| < 1` under a row-standardised `W`.
pub fn solve_spatial_lag(w: &SpatialWeights, rho: f64, b: &[f64]) -> Result<Vec<f64>, DataError> {
    let residual = |y: &[f64]| -> f64 {
        let wy = w.lag(y);
        y.iter()
            .zip(&wy)
            .zip(b)
            .map(|((yi, wyi), bi)| (yi - rho * wyi - bi).abs())
            .fold(0.0, f64::max)
    };
    let mut y = b.to_vec();
    for _ in 0..SOLVE_MAX_ITER {
        if residual(&y) <= SOLVE_TOL {
            return Ok(y);
        }
        let wy = w.lag(&y);
        y = b.iter().zip(&wy).map(|(bi, wyi)| bi + rho * wyi).collect();
    }
    Err(DataError::Solver(format!(
        "spatial lag solve did not reach residual {SOLVE_TOL} in {SOLVE_MAX_ITER} iterations (rho = {rho})"
    )))
}

/// SL-r: all coordinates are drawn first (`u`, `v` per point), then per
/// point `x₁`, `x₂`, `ε`.
pub fn generate_sl(n: usize, seed: u64, rho: f64) -> Result<GeoDataset, DataError> {
    if n < 100 {
        return Err(DataError::Contract(format!("sl-r needs n >= 100, got {n}")));
    }
    if !(rho.abs() < 1.0) {
        return Err(DataError::Contract(format!("sl-r needs |rho| < 1, got {rho}")));
    }
    let mut rng = seeded(seed);
    let coords: Vec<(f64, f64)> = (0..n).map(|_| (uniform(&mut rng), uniform(&mut rng))).collect();
    let mut points: Vec<PointRecord> = coords
        .iter()
        .enumerate()
        .map(|(i, &(u, v))| {
            let x1 = standard_normal(&mut rng);
            let x2 = standard_normal(&mut rng);
            PointRecord {
                id: PointId(i as u64),
                u,
                v,
                x: vec![x1, x2],
                y: Some(SL_NOISE_SD * standard_normal(&mut rng)),
            }
        })
        .collect();
    let b: Vec<f64> = points
        .iter()
        .map(|p| SL_BETA[0] * p.x[0] + SL_BETA[1] * p.x[1] + p.y.unwrap_or(0.0))
        .collect();
    let w = SpatialWeights::knn(&points, SL_NEIGHBORS)?;
    let y = solve_spatial_lag(&w, rho, &b)?;
    for (p, yi) in points.iter_mut().zip(y) {
        p.y = Some(yi);
    }
    let params = BTreeMap::from([
        ("n".to_string(), n as f64),
        ("rho".to_string(), rho),
        ("noise_sd".to_string(), SL_NOISE_SD),
        ("beta1".to_string(), SL_BETA[0]),
        ("beta2".to_string(), SL_BETA[1]),
        ("neighbors".to_string(), SL_NEIGHBORS as f64),
    ]);
    Ok(GeoDataset::new(
        points,
        Some(DatasetMeta {
            generator: "sl-r".into(),
            seed,
            params,
        }),
    ))
}
