use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};
use crate::data::rng::{seeded, standard_normal};
use crate::numerics::{softplus_inverse, Tensor2};
use crate::spatial::PointRecord;

pub const FORMAT_NAME: &str = "geoagg-params";
pub const FORMAT_VERSION: u32 = 1;

/// Indices of one attention block's projections in the parameter list.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIdx {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerIdx {
    pub inducing: usize,
    pub isab_ln_g: usize,
    pub isab_ln_b: usize,
    pub isab_in: AttnIdx,
    pub isab_out: AttnIdx,
    pub ffn_ln_g: usize,
    pub ffn_ln_b: usize,
    pub ffn_w1: usize,
    pub ffn_b1: usize,
    pub ffn_w2: usize,
    pub ffn_b2: usize,
    pub geo_ln_g: usize,
    pub geo_ln_b: usize,
    pub geo: AttnIdx,
    pub lambda_raw: usize,
}

/// Where every named tensor lives; a pure function of the config and the
/// covariate count.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub w_x: usize,
    pub w_y: usize,
    pub b_emb: usize,
    pub mask: usize,
    pub layers: Vec<LayerIdx>,
    pub head_w1: usize,
    pub head_b1: usize,
    pub head_w2: usize,
    pub head_b2: usize,
    pub head_skip: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Zeros,
    Ones,
    /// Gaussian with standard deviation `scale / sqrt(fan_in)`.
    Fan(f64),
    Normal(f64),
    Constant(f64),
}

struct Spec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

fn specs(cfg: &ModelConfig, p: usize) -> (Vec<Spec>, Layout) {
    let d = cfg.d_model;
    let mut out: Vec<Spec> = Vec::new();
    let mut add = |name: String, rows: usize, cols: usize, init: Init| {
        out.push(Spec {
            name,
            rows,
            cols,
            init,
        });
        out.len() - 1
    };
    let w_x = add("embed.w_x".into(), p, d, Init::Fan(1.0));
    let w_y = add("embed.w_y".into(), 1, d, Init::Fan(1.0));
    let b_emb = add("embed.bias".into(), 1, d, Init::Zeros);
    let mask = add("embed.mask".into(), 1, d, Init::Normal(0.1));
    let attn = |add: &mut dyn FnMut(String, usize, usize, Init) -> usize, prefix: String| AttnIdx {
        wq: add(format!("{prefix}.wq"), d, d, Init::Fan(1.0)),
        wk: add(format!("{prefix}.wk"), d, d, Init::Fan(1.0)),
        wv: add(format!("{prefix}.wv"), d, d, Init::Fan(1.0)),
        wo: add(format!("{prefix}.wo"), d, d, Init::Fan(0.5)),
    };
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let inducing = add(format!("layer{l}.inducing"), cfg.n_inducing, d, Init::Normal(1.0));
        let isab_ln_g = add(format!("layer{l}.isab.ln_gain"), 1, d, Init::Ones);
        let isab_ln_b = add(format!("layer{l}.isab.ln_bias"), 1, d, Init::Zeros);
        let isab_in = attn(&mut add, format!("layer{l}.isab.pool"));
        let isab_out = attn(&mut add, format!("layer{l}.isab.broadcast"));
        let ffn_ln_g = add(format!("layer{l}.ffn.ln_gain"), 1, d, Init::Ones);
        let ffn_ln_b = add(format!("layer{l}.ffn.ln_bias"), 1, d, Init::Zeros);
        let ffn_w1 = add(format!("layer{l}.ffn.w1"), d, cfg.ffn_hidden, Init::Fan(1.0));
        let ffn_b1 = add(format!("layer{l}.ffn.b1"), 1, cfg.ffn_hidden, Init::Zeros);
        let ffn_w2 = add(format!("layer{l}.ffn.w2"), cfg.ffn_hidden, d, Init::Fan(0.5));
        let ffn_b2 = add(format!("layer{l}.ffn.b2"), 1, d, Init::Zeros);
        let geo_ln_g = add(format!("layer{l}.geo.ln_gain"), 1, d, Init::Ones);
        let geo_ln_b = add(format!("layer{l}.geo.ln_bias"), 1, d, Init::Zeros);
        let geo = attn(&mut add, format!("layer{l}.geo"));
        let lambda_raw = add(
            format!("layer{l}.geo.lambda_raw"),
            1,
            cfg.n_abf(),
            Init::Constant(softplus_inverse(cfg.lambda_init)),
        );
        layers.push(LayerIdx {
            inducing,
            isab_ln_g,
            isab_ln_b,
            isab_in,
            isab_out,
            ffn_ln_g,
            ffn_ln_b,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            geo_ln_g,
            geo_ln_b,
            geo,
            lambda_raw,
        });
    }
    let head_w1 = add("head.w1".into(), d, d, Init::Fan(1.0));
    let head_b1 = add("head.b1".into(), 1, d, Init::Zeros);
    let head_w2 = add("head.w2".into(), d, 1, Init::Fan(0.5));
    let head_b2 = add("head.b2".into(), 1, 1, Init::Zeros);
    let head_skip = add("head.skip".into(), d, 1, Init::Fan(0.5));
    let layout = Layout {
        w_x,
        w_y,
        b_emb,
        mask,
        layers,
        head_w1,
        head_b1,
        head_w2,
        head_b2,
        head_skip,
    };
    (out, layout)
}

/// Standardisation applied to covariates and targets before the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

impl Normalizer {
    pub fn identity(p: usize) -> Self {
        Self {
            x_mean: vec![0.0; p],
            x_std: vec![1.0; p],
            y_mean: 0.0,
            y_std: 1.0,
        }
    }

    /// Column means and population standard deviations of the rows; a
    /// zero spread is replaced by 1.
    pub fn fit(points: &[PointRecord]) -> Result<Self, ModelError> {
        let p = points.first().map_or(0, |r| r.x.len());
        if points.is_empty() {
            return Err(ModelError::Contract("cannot fit a normalizer on no rows".into()));
        }
        let n = points.len() as f64;
        let stats = |vals: &mut dyn Iterator<Item = f64>| {
            let v: Vec<f64> = vals.collect();
            let mean = v.iter().sum::<f64>() / n;
            let sd = (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
            (mean, if sd > 1e-12 { sd } else { 1.0 })
        };
        let mut x_mean = Vec::with_capacity(p);
        let mut x_std = Vec::with_capacity(p);
        for j in 0..p {
            let (m, s) = stats(&mut points.iter().map(|r| r.x[j]));
            x_mean.push(m);
            x_std.push(s);
        }
        if points.iter().any(|r| r.y.is_none()) {
            return Err(ModelError::Contract("normalizer needs targets on every row".into()));
        }
        let (y_mean, y_std) = stats(&mut points.iter().map(|r| r.y.unwrap_or(0.0)));
        Ok(Self {
            x_mean,
            x_std,
            y_mean,
            y_std,
        })
    }

    pub fn x(&self, j: usize, value: f64) -> f64 {
        (value - self.x_mean[j]) / self.x_std[j]
    }

    pub fn y(&self, value: f64) -> f64 {
        (value - self.y_mean) / self.y_std
    }

    pub fn y_inverse(&self, value: f64) -> f64 {
        value * self.y_std + self.y_mean
    }
}

/// All learnable arrays of the network plus the fixed input standardisation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    n_covariates: usize,
    normalizer: Normalizer,
    names: Vec<String>,
    tensors: Vec<Tensor2>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedArray {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ParamsFile {
    format: String,
    format_version: u32,
    config: ModelConfig,
    n_covariates: usize,
    normalizer: Normalizer,
    arrays: Vec<NamedArray>,
}

impl ModelParams {
    /// Random initialisation, fully determined by `seed`.
    pub fn init(
        config: &ModelConfig,
        n_covariates: usize,
        normalizer: Normalizer,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if normalizer.x_mean.len() != n_covariates {
            return Err(ModelError::Contract(format!(
                "normalizer has {} covariates, model has {n_covariates}",
                normalizer.x_mean.len()
            )));
        }
        let (specs, _) = specs(config, n_covariates);
        let mut rng = seeded(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for s in specs {
            let mut t = Tensor2::zeros(s.rows, s.cols);
            let sd = match s.init {
                Init::Fan(scale) => Some(scale / (s.rows.max(1) as f64).sqrt()),
                Init::Normal(sd) => Some(sd),
                _ => None,
            };
            for v in t.data_mut() {
                *v = match (s.init, sd) {
                    (Init::Ones, _) => 1.0,
                    (Init::Constant(c), _) => c,
                    (_, Some(sd)) => sd * standard_normal(&mut rng),
                    _ => 0.0,
                };
            }
            names.push(s.name);
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            n_covariates,
            normalizer,
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor2] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor2] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor2> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor2::len).sum()
    }

    pub(crate) fn layout(&self) -> Layout {
        specs(&self.config, self.n_covariates).1
    }

    /// Effective bias factors `softplus(λ̃)` of layer `layer`.
    pub fn lambdas(&self, layer: usize) -> Vec<f64> {
        self.get(&format!("layer{layer}.geo.lambda_raw"))
            .map(|t| t.data().iter().map(|&r| crate::numerics::softplus(r)).collect())
            .unwrap_or_default()
    }

    pub(crate) fn to_file(&self) -> ParamsFile {
        ParamsFile {
            format: FORMAT_NAME.into(),
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            n_covariates: self.n_covariates,
            normalizer: self.normalizer.clone(),
            arrays: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(name, t)| NamedArray {
                    name: name.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub(crate) fn from_file(file: ParamsFile) -> Result<Self, ModelError> {
        if file.format != FORMAT_NAME || file.format_version != FORMAT_VERSION {
            return Err(ModelError::Format(format!(
                "expected {FORMAT_NAME} v{FORMAT_VERSION}, found {} v{}",
                file.format, file.format_version
            )));
        }
        file.config.validate()?;
        let (specs, _) = specs(&file.config, file.n_covariates);
        if specs.len() != file.arrays.len() {
            return Err(ModelError::Format(format!(
                "expected {} arrays, found {}",
                specs.len(),
                file.arrays.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (spec, arr) in specs.into_iter().zip(file.arrays) {
            if spec.name != arr.name || spec.rows != arr.rows || spec.cols != arr.cols {
                return Err(ModelError::Format(format!(
                    "array `{}` {}x{} does not match expected `{}` {}x{}",
                    arr.name, arr.rows, arr.cols, spec.name, spec.rows, spec.cols
                )));
            }
            let t = Tensor2::from_vec(arr.rows, arr.cols, arr.data)
                .map_err(|e| ModelError::Format(format!("array `{}`: {e}", arr.name)))?;
            names.push(arr.name);
            tensors.push(t);
        }
        Ok(Self {
            config: file.config,
            n_covariates: file.n_covariates,
            normalizer: file.normalizer,
            names,
            tensors,
        })
    }

    /// Self-describing JSON: format tag and version, config, normaliser,
    /// and every array by name in row-major order.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("parameter file serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: ParamsFile =
            serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        Self::from_file(file)
    }
}
