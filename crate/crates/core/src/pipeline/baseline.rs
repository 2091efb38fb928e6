use super::PipelineError;
use crate::numerics::solve_dense;
use crate::spatial::PointRecord;

/// Location-blind global least squares `y ≈ b0 + Σ b_j x_j`. Returns
/// `[b0, b1, …, bp]`.
pub fn fit_ols(points: &[PointRecord]) -> Result<Vec<f64>, PipelineError> {
    let p = points.first().map_or(0, |r| r.x.len());
    let n = p + 1;
    let mut a = vec![vec![0.0; n]; n];
    let mut rhs = vec![0.0; n];
    for r in points {
        let y = r
            .y
            .ok_or_else(|| PipelineError::Contract(format!("point {} has no target", r.id)))?;
        let mut z = Vec::with_capacity(n);
        z.push(1.0);
        z.extend_from_slice(&r.x);
        for i in 0..n {
            for j in 0..n {
                a[i][j] += z[i] * z[j];
            }
            rhs[i] += z[i] * y;
        }
    }
    solve_dense(a, rhs).map_err(|e| PipelineError::Contract(format!("ordinary least squares: {e}")))
}

pub fn ols_predict(coef: &[f64], x: &[f64]) -> f64 {
    coef[0] + coef[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
}
