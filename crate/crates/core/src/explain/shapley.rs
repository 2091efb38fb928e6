use super::ExplainError;
use crate::numerics::solve_dense;

/// Largest player count handled by exact enumeration.
pub const MAX_EXACT_PLAYERS: usize = 20;

pub(crate) fn check_players(m: usize, values: &[f64]) -> Result<(), ExplainError> {
    if m == 0 || m > MAX_EXACT_PLAYERS {
        return Err(ExplainError::TooManyPlayers(m));
    }
    if values.len() != 1 << m {
        return Err(ExplainError::Contract(format!(
            "{} coalition values for {m} players (need {})",
            values.len(),
            1usize << m
        )));
    }
    Ok(())
}

fn factorials(n: usize) -> Vec<f64> {
    let mut f = vec![1.0; n + 1];
    for i in 1..=n {
        f[i] = f[i - 1] * i as f64;
    }
    f
}

/// Exact Shapley values from the values of all `2^m` coalitions, indexed by
/// bitmask (bit `a` set when player `a` is present):
/// `φ_a = Σ_{S ∌ a} |S|!(m−|S|−1)!/m! · (v(S ∪ {a}) − v(S))`.
pub fn shapley_exact(values: &[f64], m: usize) -> Result<Vec<f64>, ExplainError> {
    check_players(m, values)?;
    let f = factorials(m);
    let weight: Vec<f64> = (0..m).map(|s| f[s] * f[m - s - 1] / f[m]).collect();
    let mut phi = vec![0.0; m];
    for s in 0..(1usize << m) {
        let size = s.count_ones() as usize;
        for (a, p) in phi.iter_mut().enumerate() {
            if s & (1 << a) == 0 {
                *p += weight[size] * (values[s | (1 << a)] - values[s]);
            }
        }
    }
    Ok(phi)
}

/// Shapley interaction index of players `a` and `b`:
/// `Σ_{S ⊆ N∖{a,b}} |S|!(m−|S|−2)!/(m−1)! · (v(S∪{a,b}) − v(S∪{a}) − v(S∪{b}) + v(S))`.
pub fn interaction_index(values: &[f64], m: usize, a: usize, b: usize) -> Result<f64, ExplainError> {
    check_players(m, values)?;
    if a == b || a >= m || b >= m {
        return Err(ExplainError::Contract(format!("invalid player pair ({a}, {b}) for {m} players")));
    }
    let f = factorials(m);
    let (ba, bb) = (1usize << a, 1usize << b);
    let mut total = 0.0;
    for s in 0..(1usize << m) {
        if s & (ba | bb) != 0 {
            continue;
        }
        let size = s.count_ones() as usize;
        let w = f[size] * f[m - size - 2] / f[m - 1];
        total += w * (values[s | ba | bb] - values[s | ba] - values[s | bb] + values[s]);
    }
    Ok(total)
}

/// Shapley values as the solution of the Kernel SHAP weighted least-squares
/// problem over every proper non-empty coalition, with weights
/// `(m−1) / (C(m,|S|) · |S| · (m−|S|))` and the efficiency constraint
/// eliminated through the last player.
pub fn kernel_shap_exact(values: &[f64], m: usize) -> Result<Vec<f64>, ExplainError> {
    check_players(m, values)?;
    let full = (1usize << m) - 1;
    let base = values[0];
    let total = values[full] - base;
    if m == 1 {
        return Ok(vec![total]);
    }
    let f = factorials(m);
    let q = m - 1;
    let last = 1usize << q;
    let mut ata = vec![vec![0.0; q]; q];
    let mut atb = vec![0.0; q];
    for s in 1..full {
        let size = s.count_ones() as usize;
        let binom = f[m] / (f[size] * f[m - size]);
        let w = (m - 1) as f64 / (binom * size as f64 * (m - size) as f64);
        let zl = f64::from(u8::from(s & last != 0));
        let row: Vec<f64> = (0..q).map(|j| f64::from(u8::from(s & (1 << j) != 0)) - zl).collect();
        let t = values[s] - base - zl * total;
        for i in 0..q {
            for j in 0..q {
                ata[i][j] += w * row[i] * row[j];
            }
            atb[i] += w * row[i] * t;
        }
    }
    let mut phi = solve_dense(ata, atb).map_err(|e| ExplainError::Contract(e.to_string()))?;
    let rest: f64 = phi.iter().sum();
    phi.push(total - rest);
    Ok(phi)
}
