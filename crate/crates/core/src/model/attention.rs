use super::ModelError;
use crate::numerics::{NumericsError, Slot, Tape, Tensor2};

/// Attention weights of one attention call, one `queries × keys` matrix per
/// head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub heads: Vec<Tensor2>,
}

impl AttentionTrace {
    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.heads
            .iter()
            .flat_map(|a| (0..a.rows()).map(move |r| (a.row(r).iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

/// Distance penalty `−λ_h · d²` added to the logits of head `h`. `lambdas`
/// is a `1 × n` slot holding either one factor per head or a single shared
/// factor.
pub(crate) struct Bias<'a> {
    pub lambdas: Slot,
    pub sq_dist: &'a Tensor2,
}

/// Scaled dot-product attention over `n_heads` column blocks of already
/// projected `q`, `k`, `v`. Returns the concatenated head outputs.
pub(crate) fn multi_head(
    tape: &mut Tape<'_>,
    q: Slot,
    k: Slot,
    v: Slot,
    n_heads: usize,
    bias: Option<&Bias<'_>>,
    want_trace: bool,
) -> Result<(Slot, Option<AttentionTrace>), NumericsError> {
    let d = tape.value(q).cols();
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(NumericsError::Contract(format!(
            "{d} columns do not split into {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let shared = bias.map(|b| tape.value(b.lambdas).cols() == 1);
    let mut outs = Vec::with_capacity(n_heads);
    let mut trace = want_trace.then(|| Vec::with_capacity(n_heads));
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let raw = tape.matmul_bt(qh, kh)?;
        let mut logits = tape.scale(raw, scale);
        if let Some(b) = bias {
            let col = if shared == Some(true) { 0 } else { h };
            let lam = tape.slice_cols(b.lambdas, col, 1)?;
            logits = tape.add_scaled_const(logits, lam, b.sq_dist, -1.0)?;
        }
        let alpha = tape.softmax_rows(logits);
        if let Some(t) = trace.as_mut() {
            t.push(tape.value(alpha).clone());
        }
        outs.push(tape.matmul(alpha, vh)?);
    }
    let out = tape.concat_cols(&outs)?;
    Ok((out, trace.map(|heads| AttentionTrace { heads })))
}

/// Multi-head attention with the Gaussian distance bias on projected
/// queries, keys, and values:
/// `α_h = softmax(q_h k_hᵀ / √head_dim − λ_h · d²)`, output row `i` is the
/// concatenation over heads of `Σ_j α_h[i,j] v_h[j]` (before any output
/// projection).
///
/// `lambdas` holds one factor per head, or a single factor shared by all
/// heads.
pub fn biased_attention(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    sq_dist: &Tensor2,
    lambdas: &[f64],
    n_heads: usize,
) -> Result<(Tensor2, AttentionTrace), ModelError> {
    if sq_dist.shape() != (q.rows(), k.rows()) {
        return Err(ModelError::Contract(format!(
            "distance matrix {:?} does not match {} queries and {} keys",
            sq_dist.shape(),
            q.rows(),
            k.rows()
        )));
    }
    if let Some(bad) = sq_dist.data().iter().find(|d| !(**d >= 0.0)) {
        return Err(ModelError::Contract(format!("negative squared distance {bad}")));
    }
    if !(lambdas.len() == 1 || lambdas.len() == n_heads) {
        return Err(ModelError::Contract(format!(
            "{} bias factors for {n_heads} heads",
            lambdas.len()
        )));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(**l >= 0.0)) {
        return Err(ModelError::Contract(format!("negative bias factor {bad}")));
    }
    let mut tape = Tape::inference();
    let (qs, ks, vs) = (tape.param(q), tape.param(k), tape.param(v));
    let lambdas = tape.constant(Tensor2::row_vector(lambdas));
    let bias = Bias { lambdas, sq_dist };
    let (out, trace) = multi_head(&mut tape, qs, ks, vs, n_heads, Some(&bias), true)?;
    let trace = trace.ok_or_else(|| ModelError::Contract("trace missing".into()))?;
    Ok((tape.value(out).clone(), trace))
}
