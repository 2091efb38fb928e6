use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Number of learnable inducing points per layer.
    pub n_inducing: usize,
    /// Sequence length used for training and default inference.
    pub max_len: usize,
    pub n_layers: usize,
    /// Hidden width of the position-wise feed-forward block.
    pub ffn_hidden: usize,
    /// Initial attention bias factor `λ` (after the softplus).
    pub lambda_init: f64,
    /// Share one bias factor across all heads of a layer.
    pub legacy_single_abf: bool,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_inducing: 8,
            max_len: 64,
            n_layers: 2,
            ffn_hidden: 64,
            lambda_init: 1.0,
            legacy_single_abf: false,
            rope_base: 100.0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    /// Number of bias factors per layer.
    pub fn n_abf(&self) -> usize {
        if self.legacy_single_abf {
            1
        } else {
            self.n_heads
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.head_dim().is_multiple_of(4) {
            return fail(format!(
                "head_dim {} must be divisible by 4 for 2-D rotary pairs",
                self.head_dim()
            ));
        }
        if self.n_inducing == 0 {
            return fail("n_inducing must be at least 1".into());
        }
        if self.max_len < 2 {
            return fail(format!("max_len must be at least 2, got {}", self.max_len));
        }
        if self.ffn_hidden == 0 {
            return fail("ffn_hidden must be at least 1".into());
        }
        if !(self.lambda_init > 0.0 && self.lambda_init.is_finite()) {
            return fail(format!("lambda_init must be positive, got {}", self.lambda_init));
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return fail(format!("rope_base must be positive, got {}", self.rope_base));
        }
        Ok(())
    }
}
