use rayon::prelude::*;

use super::attention::{multi_head, AttentionTrace, Bias};
use super::params::{AttnIdx, LayerIdx, Layout};
use super::{ModelError, ModelParams};
use crate::numerics::{Slot, Tape, Tensor2};
use crate::spatial::PointRecord;

const LN_EPS: f64 = 1e-5;

/// Standardised network input for one target. Row 0 is the target; its
/// target value is hidden behind the learned mask embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    x: Tensor2,
    y: Tensor2,
    masked: Tensor2,
    coords: Vec<(f64, f64)>,
    sq_dist: Tensor2,
}

impl ModelInput {
    /// Builds the input from an assembled sequence whose first record is the
    /// target. Context records must carry targets; the target's own `y` is
    /// ignored.
    pub fn from_sequence(seq: &[PointRecord], params: &ModelParams) -> Result<Self, ModelError> {
        let target = seq
            .first()
            .ok_or_else(|| ModelError::Contract("empty sequence".into()))?;
        let p = params.n_covariates();
        let norm = params.normalizer();
        let l = seq.len();
        let mut x = Tensor2::zeros(l, p);
        let mut y = Tensor2::zeros(l, 1);
        let mut masked = Tensor2::zeros(l, 1);
        let mut coords = Vec::with_capacity(l);
        let mut sq_dist = Tensor2::zeros(1, l);
        for (i, rec) in seq.iter().enumerate() {
            if rec.x.len() != p {
                return Err(ModelError::CovariateMismatch {
                    id: rec.id.0,
                    expected: p,
                    found: rec.x.len(),
                });
            }
            for (j, &v) in rec.x.iter().enumerate() {
                x.set(i, j, norm.x(j, v));
            }
            if i == 0 {
                masked.set(0, 0, 1.0);
            } else {
                let val = rec.y.ok_or_else(|| {
                    ModelError::Contract(format!("context point {} has no target value", rec.id))
                })?;
                y.set(i, 0, norm.y(val));
            }
            coords.push((rec.u, rec.v));
            sq_dist.set(0, i, rec.sq_dist_to(target));
        }
        Ok(Self {
            x,
            y,
            masked,
            coords,
            sq_dist,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// The input with every row, the target included, listed `times` times.
    /// Row 0 stays the target.
    pub fn repeated(&self, times: usize) -> Self {
        let rep = |t: &Tensor2| {
            let rows: Vec<Vec<f64>> = (0..times)
                .flat_map(|_| (0..t.rows()).map(|r| t.row(r).to_vec()))
                .collect();
            let mut out = Tensor2::zeros(rows.len(), t.cols());
            for (r, row) in rows.iter().enumerate() {
                out.row_mut(r).copy_from_slice(row);
            }
            out
        };
        let d = self.sq_dist.data().repeat(times);
        Self {
            x: rep(&self.x),
            y: rep(&self.y),
            masked: rep(&self.masked),
            coords: self.coords.repeat(times),
            sq_dist: Tensor2::row_vector(&d),
        }
    }
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Prediction on the standardised target scale.
    pub normalized: f64,
    /// Prediction in target units.
    pub value: f64,
    /// Distance-biased attention weights of the target row, one trace per
    /// layer (present when requested).
    pub traces: Vec<AttentionTrace>,
}

fn project(tape: &mut Tape<'_>, ps: &[Slot], q_in: Slot, kv_in: Slot, a: &AttnIdx) -> Result<[Slot; 3], ModelError> {
    Ok([
        tape.matmul(q_in, ps[a.wq])?,
        tape.matmul(kv_in, ps[a.wk])?,
        tape.matmul(kv_in, ps[a.wv])?,
    ])
}

/// Induced-point block on the residual stream `e`: the inducing points pool
/// the normalised tokens into an `m`-row summary, then every token reads the
/// summary back. Returns `(summary, e + update)`.
fn induced(
    tape: &mut Tape<'_>,
    ps: &[Slot],
    lay: &LayerIdx,
    n_heads: usize,
    e: Slot,
) -> Result<(Slot, Slot), ModelError> {
    let n = tape.layer_norm(e, ps[lay.isab_ln_g], ps[lay.isab_ln_b], LN_EPS)?;
    let [q, k, v] = project(tape, ps, ps[lay.inducing], n, &lay.isab_in)?;
    let (s, _) = multi_head(tape, q, k, v, n_heads, None, false)?;
    let summary = tape.matmul(s, ps[lay.isab_in.wo])?;
    let [q, k, v] = project(tape, ps, n, summary, &lay.isab_out)?;
    let (u, _) = multi_head(tape, q, k, v, n_heads, None, false)?;
    let update = tape.matmul(u, ps[lay.isab_out.wo])?;
    Ok((summary, tape.add(e, update)?))
}

fn build(
    tape: &mut Tape<'_>,
    ps: &[Slot],
    params: &ModelParams,
    layout: &Layout,
    input: &ModelInput,
    want_trace: bool,
) -> Result<(Slot, Vec<AttentionTrace>), ModelError> {
    let cfg = params.config();
    let h = cfg.n_heads;
    if input.x.cols() != params.n_covariates() {
        return Err(ModelError::Contract(format!(
            "input has {} covariates, model expects {}",
            input.x.cols(),
            params.n_covariates()
        )));
    }
    if input.is_empty() {
        return Err(ModelError::Contract("empty input".into()));
    }

    let xs = tape.constant(input.x.clone());
    let ys = tape.constant(input.y.clone());
    let ms = tape.constant(input.masked.clone());
    let ex = tape.matmul(xs, ps[layout.w_x])?;
    let ey = tape.matmul(ys, ps[layout.w_y])?;
    let em = tape.matmul(ms, ps[layout.mask])?;
    let mut e = tape.add(ex, ey)?;
    e = tape.add(e, em)?;
    e = tape.add_row(e, ps[layout.b_emb])?;

    let mut traces = Vec::new();
    for lay in &layout.layers {
        e = induced(tape, ps, lay, h, e)?.1;

        let n = tape.layer_norm(e, ps[lay.ffn_ln_g], ps[lay.ffn_ln_b], LN_EPS)?;
        let a = tape.matmul(n, ps[lay.ffn_w1])?;
        let a = tape.add_row(a, ps[lay.ffn_b1])?;
        let a = tape.silu(a);
        let f = tape.matmul(a, ps[lay.ffn_w2])?;
        let f = tape.add_row(f, ps[lay.ffn_b2])?;
        e = tape.add(e, f)?;

        let n = tape.layer_norm(e, ps[lay.geo_ln_g], ps[lay.geo_ln_b], LN_EPS)?;
        let n0 = tape.slice_rows(n, 0, 1)?;
        let [q, k, v] = project(tape, ps, n0, n, &lay.geo)?;
        let q = tape.rope2d(q, &input.coords[..1], h, cfg.rope_base)?;
        let k = tape.rope2d(k, &input.coords, h, cfg.rope_base)?;
        let lambdas = tape.softplus(ps[lay.lambda_raw]);
        let bias = Bias {
            lambdas,
            sq_dist: &input.sq_dist,
        };
        let (t, trace) = multi_head(tape, q, k, v, h, Some(&bias), want_trace)?;
        traces.extend(trace);
        let t = tape.matmul(t, ps[lay.geo.wo])?;
        e = tape.add_into_rows(e, t, 0)?;
    }

    let z = tape.slice_rows(e, 0, 1)?;
    let a = tape.matmul(z, ps[layout.head_w1])?;
    let a = tape.add_row(a, ps[layout.head_b1])?;
    let a = tape.silu(a);
    let out = tape.matmul(a, ps[layout.head_w2])?;
    let out = tape.add_row(out, ps[layout.head_b2])?;
    let skip = tape.matmul(z, ps[layout.head_skip])?;
    Ok((tape.add(out, skip)?, traces))
}

fn register<'p>(tape: &mut Tape<'p>, params: &'p ModelParams) -> Vec<Slot> {
    params.tensors().iter().map(|t| tape.param(t)).collect()
}

/// Evaluates the network on one input without recording gradients.
pub fn forward(params: &ModelParams, input: &ModelInput, want_trace: bool) -> Result<ForwardOutput, ModelError> {
    let mut tape = Tape::inference();
    let ps = register(&mut tape, params);
    let (out, traces) = build(&mut tape, &ps, params, &params.layout(), input, want_trace)?;
    let normalized = tape.value(out).item().unwrap_or(f64::NAN);
    Ok(ForwardOutput {
        normalized,
        value: params.normalizer().y_inverse(normalized),
        traces,
    })
}

pub fn predict_normalized(params: &ModelParams, input: &ModelInput) -> Result<f64, ModelError> {
    Ok(forward(params, input, false)?.normalized)
}

/// Prediction in target units for an assembled sequence (target first).
pub fn predict(params: &ModelParams, seq: &[PointRecord]) -> Result<f64, ModelError> {
    let input = ModelInput::from_sequence(seq, params)?;
    Ok(forward(params, &input, false)?.value)
}

/// Pooled summary and refreshed residual stream of layer `layer`'s
/// induced-point block applied to the token matrix `tokens`.
pub fn induced_block(
    params: &ModelParams,
    layer: usize,
    tokens: &Tensor2,
) -> Result<(Tensor2, Tensor2), ModelError> {
    let layout = params.layout();
    let lay = layout
        .layers
        .get(layer)
        .ok_or_else(|| ModelError::Contract(format!("no layer {layer}")))?;
    let mut tape = Tape::inference();
    let ps = register(&mut tape, params);
    let e = tape.param(tokens);
    let (s, out) = induced(&mut tape, &ps, lay, params.config().n_heads, e)?;
    Ok((tape.value(s).clone(), tape.value(out).clone()))
}

fn one_loss_and_grad(
    params: &ModelParams,
    layout: &Layout,
    input: &ModelInput,
    target: f64,
) -> Result<(f64, Vec<Tensor2>), ModelError> {
    let mut tape = Tape::new();
    let ps = register(&mut tape, params);
    let (pred, _) = build(&mut tape, &ps, params, layout, input, false)?;
    let loss = tape.mse(pred, &Tensor2::scalar(target))?;
    let mut grads = tape.backward(loss)?;
    let g = ps
        .iter()
        .zip(params.tensors())
        .map(|(&s, t)| grads.take(s).unwrap_or_else(|| Tensor2::zeros(t.rows(), t.cols())))
        .collect();
    Ok((tape.value(loss).item().unwrap_or(f64::NAN), g))
}

/// Mean squared error over `batch` (standardised targets) and its gradient
/// with respect to every parameter tensor, in parameter order.
///
/// Sequences are differentiated independently, possibly in parallel, and
/// summed in batch order so the result does not depend on scheduling.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &[(ModelInput, f64)],
) -> Result<(f64, Vec<Tensor2>), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::Contract("empty batch".into()));
    }
    let layout = params.layout();
    let parts: Vec<(f64, Vec<Tensor2>)> = batch
        .par_iter()
        .map(|(input, target)| one_loss_and_grad(params, &layout, input, *target))
        .collect::<Result<_, _>>()?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut total: Vec<Tensor2> = params
        .tensors()
        .iter()
        .map(|t| Tensor2::zeros(t.rows(), t.cols()))
        .collect();
    for (l, g) in parts {
        loss += l;
        for (acc, gi) in total.iter_mut().zip(&g) {
            for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += b;
            }
        }
    }
    for t in &mut total {
        for v in t.data_mut() {
            *v /= n;
        }
    }
    Ok((loss / n, total))
}

/// Largest relative disagreement between [`loss_and_grad`] and central
/// differences with step `eps` over every scalar parameter. The relative
/// error of an entry is `|a − n| / max(|a|, |n|, 1e-6)`, so gradients that
/// are numerically zero are compared on an absolute scale.
pub fn gradient_check(params: &ModelParams, batch: &[(ModelInput, f64)], eps: f64) -> Result<f64, ModelError> {
    let (_, analytic) = loss_and_grad(params, batch)?;
    let mut probe = params.clone();
    let loss = |p: &ModelParams| -> Result<f64, ModelError> {
        let mut sum = 0.0;
        for (input, target) in batch {
            let d = predict_normalized(p, input)? - target;
            sum += d * d;
        }
        Ok(sum / batch.len() as f64)
    };
    let mut worst = 0.0_f64;
    for (ti, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = probe.tensors()[ti].data()[j];
            probe.tensors_mut()[ti].data_mut()[j] = orig + eps;
            let up = loss(&probe)?;
            probe.tensors_mut()[ti].data_mut()[j] = orig - eps;
            let down = loss(&probe)?;
            probe.tensors_mut()[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::rng::{seeded, standard_normal, uniform};
    use crate::model::{ModelConfig, Normalizer};
    use crate::spatial::PointId;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_inducing: 2,
            max_len: 8,
            n_layers: 2,
            ffn_hidden: 8,
            ..Default::default()
        }
    }

    fn sequence(len: usize, p: usize, seed: u64) -> Vec<PointRecord> {
        let mut rng = seeded(seed);
        (0..len)
            .map(|i| PointRecord {
                id: PointId(i as u64),
                u: uniform(&mut rng),
                v: uniform(&mut rng),
                x: (0..p).map(|_| standard_normal(&mut rng)).collect(),
                y: Some(standard_normal(&mut rng)),
            })
            .collect()
    }

    fn params(cfg: &ModelConfig, p: usize, seed: u64) -> ModelParams {
        ModelParams::init(cfg, p, Normalizer::identity(p), seed).unwrap()
    }

    #[test]
    fn masked_target_value_does_not_leak() {
        let p = params(&ModelConfig::default(), 2, 0);
        let mut seq = sequence(16, 2, 1);
        let a = predict(&p, &seq).unwrap();
        seq[0].y = Some(123.0);
        assert_eq!(predict(&p, &seq).unwrap(), a);
        seq[0].y = None;
        assert_eq!(predict(&p, &seq).unwrap(), a);
        seq[3].y = Some(5.0);
        assert_ne!(predict(&p, &seq).unwrap(), a);
    }

    #[test]
    fn zero_covariates_with_zero_weights_embed_to_bias() {
        let cfg = ModelConfig::default();
        let mut p = params(&cfg, 2, 0);
        for name in ["embed.w_x", "embed.w_y"] {
            p.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let input = ModelInput::from_sequence(&sequence(4, 2, 3), &p).unwrap();
        let layout = p.layout();
        let mut tape = Tape::inference();
        let ps = register(&mut tape, &p);
        let xs = tape.constant(input.x.clone());
        let e = tape.matmul(xs, ps[layout.w_x]).unwrap();
        let e = tape.add_row(e, ps[layout.b_emb]).unwrap();
        let bias = p.get("embed.bias").unwrap();
        for r in 0..4 {
            assert_eq!(tape.value(e).row(r), bias.row(0));
        }
    }

    #[test]
    fn covariate_mismatch_is_reported() {
        let p = params(&ModelConfig::default(), 3, 0);
        let err = ModelInput::from_sequence(&sequence(4, 2, 0), &p).unwrap_err();
        assert_eq!(
            err,
            ModelError::CovariateMismatch {
                id: 0,
                expected: 3,
                found: 2
            }
        );
    }

    #[test]
    fn target_alone_gives_finite_prediction() {
        let p = params(&ModelConfig::default(), 2, 4);
        let out = forward(&p, &ModelInput::from_sequence(&sequence(1, 2, 0), &p).unwrap(), true).unwrap();
        assert!(out.value.is_finite());
        assert!(out.traces.iter().all(|t| t.heads.iter().all(|a| a.item() == Some(1.0))));
    }

    #[test]
    fn traces_are_row_stochastic() {
        let p = params(&ModelConfig::default(), 2, 4);
        let out = forward(&p, &ModelInput::from_sequence(&sequence(32, 2, 9), &p).unwrap(), true).unwrap();
        assert_eq!(out.traces.len(), 2);
        for t in &out.traces {
            assert_eq!(t.heads.len(), 4);
            assert!(t.max_row_sum_error() < 1e-9);
        }
    }

    #[test]
    fn duplicating_the_whole_sequence_keeps_the_prediction() {
        // Exact for one layer. Deeper stacks update only row 0 in the
        // distance-biased attention, so the target's duplicate lags behind
        // from the second layer on.
        let p = params(&ModelConfig { n_layers: 1, ..Default::default() }, 2, 5);
        let input = ModelInput::from_sequence(&sequence(20, 2, 6), &p).unwrap();
        let a = predict_normalized(&p, &input).unwrap();
        let b = predict_normalized(&p, &input.repeated(2)).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn legacy_mode_matches_equal_per_head_factors() {
        let cfg = ModelConfig::default();
        let legacy_cfg = ModelConfig {
            legacy_single_abf: true,
            ..cfg.clone()
        };
        let mut per_head = params(&cfg, 2, 7);
        let mut legacy = params(&legacy_cfg, 2, 7);
        for l in 0..cfg.n_layers {
            let name = format!("layer{l}.geo.lambda_raw");
            per_head.get_mut(&name).unwrap().data_mut().fill(0.3);
            legacy.get_mut(&name).unwrap().data_mut().fill(0.3);
        }
        for (name, t) in per_head.names().to_vec().iter().zip(per_head.tensors().to_vec()) {
            if !name.ends_with("lambda_raw") {
                *legacy.get_mut(name).unwrap() = t;
            }
        }
        let seq = sequence(24, 2, 8);
        let a = predict(&per_head, &seq).unwrap();
        let b = predict(&legacy, &seq).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn lambda_perturbation_moves_only_its_head() {
        let mut p = params(&ModelConfig { n_layers: 1, ..Default::default() }, 2, 1);
        let input = ModelInput::from_sequence(&sequence(16, 2, 2), &p).unwrap();
        let base = forward(&p, &input, true).unwrap().traces.remove(0);
        p.get_mut("layer0.geo.lambda_raw").unwrap().data_mut()[2] += 1.0;
        let moved = forward(&p, &input, true).unwrap().traces.remove(0);
        for h in 0..4 {
            let diff = base.heads[h].max_abs_diff(&moved.heads[h]);
            assert_eq!(diff > 0.0, h == 2, "head {h}: {diff}");
        }
    }

    #[test]
    fn induced_summary_is_permutation_invariant() {
        let p = params(&ModelConfig::default(), 2, 3);
        let mut rng = seeded(4);
        let tokens: Vec<Vec<f64>> = (0..12).map(|_| (0..32).map(|_| standard_normal(&mut rng)).collect()).collect();
        let mut perm: Vec<usize> = (0..12).rev().collect();
        perm.swap(0, 5);
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| tokens[i].clone()).collect();
        let (s1, r1) = induced_block(&p, 0, &Tensor2::from_rows(&tokens).unwrap()).unwrap();
        let (s2, r2) = induced_block(&p, 0, &Tensor2::from_rows(&shuffled).unwrap()).unwrap();
        assert!(s1.max_abs_diff(&s2) < 1e-9);
        for (i, &src) in perm.iter().enumerate() {
            for c in 0..32 {
                assert!((r2.get(i, c) - r1.get(src, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_inducing_point_is_a_weighted_mean() {
        let cfg = ModelConfig {
            n_inducing: 1,
            n_heads: 1,
            d_model: 8,
            ..Default::default()
        };
        let p = params(&cfg, 1, 2);
        let mut rng = seeded(3);
        let tokens: Vec<Vec<f64>> = (0..5).map(|_| (0..8).map(|_| standard_normal(&mut rng)).collect()).collect();
        let t = Tensor2::from_rows(&tokens).unwrap();
        let (summary, refreshed) = induced_block(&p, 0, &t).unwrap();
        assert_eq!(summary.shape(), (1, 8));
        // One key on the way back, so every token receives the same update.
        let upd: Vec<Vec<f64>> = (0..5)
            .map(|r| refreshed.row(r).iter().zip(t.row(r)).map(|(a, b)| a - b).collect())
            .collect();
        for r in 1..5 {
            for c in 0..8 {
                assert!((upd[r][c] - upd[0][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let cfg = toy_config();
        let p = params(&cfg, 2, 11);
        let batch: Vec<(ModelInput, f64)> = (0..2)
            .map(|s| {
                let seq = sequence(8, 2, 20 + s);
                (ModelInput::from_sequence(&seq, &p).unwrap(), 0.5 - s as f64)
            })
            .collect();
        let err = gradient_check(&p, &batch, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn batch_gradient_is_mean_of_parts() {
        let p = params(&toy_config(), 2, 1);
        let a = (ModelInput::from_sequence(&sequence(8, 2, 1), &p).unwrap(), 0.3);
        let b = (ModelInput::from_sequence(&sequence(8, 2, 2), &p).unwrap(), -0.2);
        let (la, ga) = loss_and_grad(&p, std::slice::from_ref(&a)).unwrap();
        let (lb, gb) = loss_and_grad(&p, std::slice::from_ref(&b)).unwrap();
        let (l, g) = loss_and_grad(&p, &[a, b]).unwrap();
        assert!((l - (la + lb) / 2.0).abs() < 1e-15);
        for ((x, y), z) in ga.iter().zip(&gb).zip(&g) {
            for ((x, y), z) in x.data().iter().zip(y.data()).zip(z.data()) {
                assert!((z - (x + y) / 2.0).abs() < 1e-15);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn attention_ignores_common_translation(du in -5.0f64..5.0, dv in -5.0f64..5.0, seed in 0u64..1000) {
            let p = params(&ModelConfig::default(), 2, seed);
            let seq = sequence(10, 2, seed + 1);
            let moved: Vec<PointRecord> = seq.iter().map(|r| PointRecord { u: r.u + du, v: r.v + dv, ..r.clone() }).collect();
            let a = forward(&p, &ModelInput::from_sequence(&seq, &p).unwrap(), true).unwrap();
            let b = forward(&p, &ModelInput::from_sequence(&moved, &p).unwrap(), true).unwrap();
            for (ta, tb) in a.traces.iter().zip(&b.traces) {
                for (ha, hb) in ta.heads.iter().zip(&tb.heads) {
                    prop_assert!(ha.max_abs_diff(hb) < 1e-9);
                }
            }
            prop_assert!((a.normalized - b.normalized).abs() < 1e-9);
        }
    }
}
