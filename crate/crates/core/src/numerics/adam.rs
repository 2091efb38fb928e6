use super::{NumericsError, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor2>,
    pub v: Vec<Tensor2>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor2]) -> Self {
        let zeros: Vec<Tensor2> = params
            .iter()
            .map(|p| Tensor2::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [Tensor2],
    grads: &[Tensor2],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), NumericsError> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(NumericsError::Contract(format!(
            "adam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        for other in [g, &state.m[i], &state.v[i]] {
            if other.shape() != p.shape() {
                return Err(NumericsError::Shape {
                    op: "adam_step",
                    left: p.shape(),
                    right: other.shape(),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((pi, &gi), (mi, vi)) in it {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor2::row_vector(&[1.0, -2.0])];
        let g = vec![Tensor2::zeros(1, 2)];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_is_lr_sized() {
        // m̂ = 1, v̂ = 1 after bias correction, so the step is lr / (1 + eps).
        let mut p = vec![Tensor2::scalar(0.5)];
        let g = vec![Tensor2::scalar(1.0)];
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        let expected = 0.5 - 0.1 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn moments_follow_recurrence() {
        let cfg = AdamConfig::default();
        let mut p = vec![Tensor2::scalar(0.0)];
        let g = vec![Tensor2::scalar(0.3)];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        assert_eq!(st.step, 2);
        let m1 = 0.1 * 0.3;
        let m2 = 0.9 * m1 + 0.1 * 0.3;
        let v1 = 0.001 * 0.09;
        let v2 = 0.999 * v1 + 0.001 * 0.09;
        assert!((st.m[0].data()[0] - m2).abs() < 1e-15);
        assert!((st.v[0].data()[0] - v2).abs() < 1e-15);
        let step1 = 0.001 * (m1 / 0.1) / ((v1 / 0.001f64).sqrt() + 1e-8);
        let step2 = 0.001 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64 * 0.999)).sqrt() + 1e-8);
        assert!((p[0].data()[0] + step1 + step2).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor2::zeros(2, 2)];
        let g = vec![Tensor2::zeros(1, 2)];
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &g, &mut st, &AdamConfig::default()).is_err());
        assert_eq!(st.step, 0);
    }
}
