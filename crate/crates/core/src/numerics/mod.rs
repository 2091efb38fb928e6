//! Dense `f64` matrices, a reverse-mode tape, Adam, and a finite-difference
//! gradient checker.

mod adam;
mod linalg;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use linalg::solve_dense;
pub use tape::{softmax_rows, softplus, softplus_inverse, Gradients, Slot, Tape};
pub use tensor::Tensor2;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    Length { rows: usize, cols: usize, len: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("contract violated: {0}")]
    Contract(String),
}

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// Returns the largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`
/// over the entries of `x`.
pub fn grad_check<F>(f: F, x: &Tensor2, eps: f64) -> Result<f64, NumericsError>
where
    F: for<'t> Fn(&mut Tape<'t>, Slot) -> Result<Slot, NumericsError>,
{
    if !(eps > 0.0) {
        return Err(NumericsError::Contract(format!("grad_check eps must be > 0, got {eps}")));
    }
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone());
    let loss = f(&mut tape, input)?;
    let analytic = tape.backward(loss)?.get_or_zeros(input, x.shape());

    let eval = |probe: Tensor2| -> Result<f64, NumericsError> {
        let mut t = Tape::inference();
        let s = t.leaf(probe);
        let l = f(&mut t, s)?;
        t.value(l)
            .item()
            .ok_or_else(|| NumericsError::Contract("grad_check: loss is not scalar".into()))
    };

    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor2::from_vec(rows, cols, data).unwrap()
    }

    fn naive_matmul(a: &Tensor2, b: &Tensor2) -> Tensor2 {
        let mut out = Tensor2::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor2::identity(2));
        let b = tape.constant(Tensor2::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
        let out = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, 6.0, 7.0, 8.0]);

        let r = tape.constant(Tensor2::row_vector(&[1.0, 2.0]));
        let c = tape.constant(Tensor2::from_vec(2, 1, vec![3.0, 4.0]).unwrap());
        let out = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random(3, 4, &mut rng);
            let b = random(4, 2, &mut rng);
            let fast = a.matmul(&b).unwrap();
            assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor2::zeros(2, 3));
        let b = tape.constant(Tensor2::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            NumericsError::Shape {
                op: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
        assert!(err.to_string().contains("(2, 3) and (2, 3)"));
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor2::from_rows(&[vec![0.0, 0.0], vec![0.0, -1.0], vec![1000.0, 0.0]]).unwrap();
        let y = softmax_rows(&x);
        assert_eq!(y.row(0), &[0.5, 0.5]);
        let e = (-1.0f64).exp();
        assert!((y.get(1, 0) - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((y.get(1, 0) - 0.7311).abs() < 1e-4);
        assert!((y.get(1, 1) - 0.2689).abs() < 1e-4);
        assert_eq!(y.row(2), &[1.0, 0.0]);
        assert!(y.is_finite());
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor2::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor2::scalar(3.0));
        let c = tape.constant(Tensor2::scalar(5.0));
        let loss = tape.sum(c);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get_or_zeros(x, (1, 1)).data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor2::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(NumericsError::Contract(_))));
    }

    #[test]
    fn grad_check_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(2, 3, &mut rng);
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");

        let err = grad_check(|t, _| Ok(t.constant(Tensor2::scalar(2.5))), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
        assert!(grad_check(|t, x| Ok(t.sum(x)), &x, 0.0).is_err());
    }

    /// matmul → softmax → weighted dot: the composed example.
    #[test]
    fn composed_matmul_softmax_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let w = random(4, 4, &mut rng);
            let c = random(4, 4, &mut rng);
            let x = random(4, 4, &mut rng);
            let err = grad_check(
                |t, x| {
                    let w = t.constant(w.clone());
                    let c = t.constant(c.clone());
                    let h = t.matmul(x, w)?;
                    let s = t.softmax_rows(h);
                    let p = t.mul(s, c)?;
                    Ok(t.sum(p))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }

    type Build = fn(&mut Tape<'_>, Slot, &Tensor2) -> Result<Slot, NumericsError>;

    /// One differentiable pipeline per primitive; each ends in a weighted sum
    /// so that every output entry carries a distinct upstream gradient.
    fn primitive_cases() -> Vec<(&'static str, Build)> {
        vec![
            ("matmul", |t, x, w| {
                let c = t.constant(w.transpose());
                t.matmul(x, c)
            }),
            ("matmul_bt", |t, x, w| {
                let c = t.constant(w.clone());
                t.matmul_bt(x, c)
            }),
            ("matmul_rhs", |t, x, w| {
                let c = t.constant(w.transpose());
                t.matmul(c, x)
            }),
            ("matmul_bt_rhs", |t, x, w| {
                let c = t.constant(w.clone());
                t.matmul_bt(c, x)
            }),
            ("add_row", |t, x, _| {
                let r = t.slice_rows(x, 0, 1)?;
                t.add_row(x, r)
            }),
            ("softmax", |t, x, _| Ok(t.softmax_rows(x))),
            ("silu", |t, x, _| Ok(t.silu(x))),
            ("softplus", |t, x, _| Ok(t.softplus(x))),
            ("scale", |t, x, _| Ok(t.scale(x, -1.7))),
            ("layer_norm", |t, x, w| {
                let g = t.leaf(Tensor2::row_vector(&w.row(0)[..4]));
                let b = t.leaf(Tensor2::row_vector(&w.row(1)[..4]));
                t.layer_norm(x, g, b, 1e-5)
            }),
            ("slices", |t, x, _| {
                let a = t.slice_cols(x, 1, 2)?;
                let b = t.slice_cols(x, 0, 2)?;
                let cat = t.concat_cols(&[a, b, x])?;
                t.slice_rows(cat, 1, 2)
            }),
            ("add_into_rows", |t, x, _| {
                let top = t.slice_rows(x, 0, 1)?;
                let sq = t.mul(top, top)?;
                t.add_into_rows(x, sq, 2)
            }),
            ("add_scaled_const", |t, x, w| {
                let s = t.slice_cols(x, 0, 1)?;
                let s = t.slice_rows(s, 0, 1)?;
                t.add_scaled_const(x, s, w, -0.7)
            }),
            ("rope2d", |t, x, _| {
                let coords = [(0.1, 0.9), (-0.4, 0.3), (0.7, 0.2)];
                t.rope2d(x, &coords, 1, 100.0)
            }),
        ]
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (name, build) in primitive_cases() {
            for _ in 0..20 {
                let x = random(3, 4, &mut rng);
                let w = random(3, 4, &mut rng);
                let weights = random(1, 64, &mut rng);
                let err = grad_check(
                    |t, x| {
                        let y = build(t, x, &w)?;
                        let (r, c) = t.value(y).shape();
                        let wt = Tensor2::from_vec(r, c, weights.data()[..r * c].to_vec())?;
                        let wt = t.constant(wt);
                        let p = t.mul(y, wt)?;
                        Ok(t.sum(p))
                    },
                    &x,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-6, "{name}: {err}");
            }
        }
    }

    #[test]
    fn mse_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = random(3, 2, &mut rng);
        let x = random(3, 2, &mut rng);
        let err = grad_check(|t, x| t.mse(x, &target), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rope_rejects_bad_head_width() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor2::zeros(1, 6));
        assert!(tape.rope2d(x, &[(0.0, 0.0)], 1, 100.0).is_err());
        assert!(tape.rope2d(x, &[(0.0, 0.0)], 4, 100.0).is_err());
    }

    #[test]
    fn rope_at_origin_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(3, 8, &mut rng);
        let mut tape = Tape::inference();
        let s = tape.param(&x);
        let r = tape.rope2d(s, &[(0.0, 0.0); 3], 2, 100.0).unwrap();
        assert_eq!(tape.value(r), &x);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let w = Tensor2::identity(3);
        let mut tape = Tape::inference();
        let p = tape.param(&w);
        let s = tape.softmax_rows(p);
        let _ = tape.sum(s);
        assert_eq!(tape.op_count(), 0);
    }

    #[test]
    fn softplus_roundtrip() {
        for y in [1e-3, 0.5, 1.0, 10.0, 50.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    proptest! {
        #[test]
        fn rope_preserves_vector_norms(seed in any::<u64>(), u in -3.0f64..3.0, v in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(1, 16, &mut rng);
            let mut tape = Tape::inference();
            let s = tape.param(&x);
            let r = tape.rope2d(s, &[(u, v)], 2, 100.0).unwrap();
            let norm = |t: &Tensor2, h: usize| t.data()[h * 8..(h + 1) * 8].iter().map(|a| a * a).sum::<f64>().sqrt();
            for h in 0..2 {
                prop_assert!((norm(tape.value(r), h) - norm(&x, h)).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            row in prop::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let x = Tensor2::row_vector(&row);
            let y = softmax_rows(&x);
            prop_assert!((y.sum() - 1.0).abs() < 1e-12);
            prop_assert!(y.data().iter().all(|&v| v >= 0.0));
            let shifted = Tensor2::row_vector(&row.iter().map(|v| v + shift).collect::<Vec<_>>());
            prop_assert!(softmax_rows(&shifted).max_abs_diff(&y) < 1e-12);
        }

        #[test]
        fn matmul_is_associative(seed in 0u64..1000, m in 1usize..6, k in 1usize..6, n in 1usize..6, q in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(m, k, &mut rng);
            let b = random(k, n, &mut rng);
            let c = random(n, q, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.data().iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
            prop_assert!(left.max_abs_diff(&right) <= 1e-9 * scale);
        }
    }
}
