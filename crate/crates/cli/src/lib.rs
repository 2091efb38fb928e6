//! Command-line front end: dataset generation, training, ensemble
//! prediction, explanation, benchmarking, and a `reproduce` chain of all
//! five.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use geoagg::data::{generate_gwr, generate_sl, load_csv, save_csv, GeoDataset};
use geoagg::explain::{
    geoshapley_explain, local_coefficients, make_shap_predictor, sample_background, write_explanations,
};
use geoagg::model::ModelConfig;
use geoagg::pipeline::{
    benchmark_inference, evaluate, fit, predict_ensemble, write_loss_history, write_predictions,
    write_timings, CacheMode, TimingRow, TrainConfig, TrainedModel,
};
use geoagg::spatial::{PointRecord, QueryPool};

/// Environment variable that replaces any seed not given on the command line.
pub const SEED_ENV: &str = "GA_SEED";

#[derive(Debug, Parser)]
#[command(name = "geoagg", version, about = "Geospatial transformer regression with ensemble inference and GeoShapley explanations")]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model and write the model bundle and loss history.
    Train(TrainArgs),
    /// Ensemble predictions for every row that is not in the context pool.
    Predict(PredictArgs),
    /// GeoShapley explanations for a sample of query rows.
    Explain(ExplainArgs),
    /// Time cached and on-the-fly inference across sequence lengths.
    Bench(BenchArgs),
    /// Run gen, train, predict, explain, and bench into one directory.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum DatasetKind {
    #[value(name = "gwr-r")]
    #[serde(rename = "gwr-r")]
    GwrR,
    #[value(name = "sl-r")]
    #[serde(rename = "sl-r")]
    SlR,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub dataset: DatasetKind,
    #[arg(long, default_value_t = 2500)]
    pub n: usize,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    /// Spatial autocorrelation of the spatial-lag dataset.
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run configuration JSON; its `model` and `train` sections are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model_out: PathBuf,
    /// Loss history CSV (default: next to the model, `*.loss.csv`).
    #[arg(long)]
    pub loss_out: Option<PathBuf>,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub members: usize,
    /// Neighbor expansion factor (default: the one used in training).
    #[arg(long)]
    pub expansion: Option<f64>,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Background rows drawn from the context pool.
    #[arg(long, default_value_t = 30)]
    pub background: usize,
    /// Query rows to explain.
    #[arg(long, default_value_t = 50)]
    pub instances: usize,
    /// Ensemble members averaged inside the explained predictor.
    #[arg(long, default_value_t = 1)]
    pub members: usize,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub members: usize,
    #[arg(long)]
    pub expansion: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    /// Skip the timing benchmark.
    #[arg(long)]
    pub no_bench: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub n: usize,
    pub seed: u64,
    pub rho: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::GwrR,
            n: 2500,
            seed: 42,
            rho: DEFAULT_RHO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    pub members: usize,
    /// Falls back to the training expansion when absent.
    pub expansion: Option<f64>,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self { members: 8, expansion: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    pub background: usize,
    pub instances: usize,
    pub members: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            background: 30,
            instances: 50,
            members: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub members: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![16, 32, 64, 128],
            members: 8,
        }
    }
}

/// Everything a `reproduce` run depends on. Missing sections take their
/// defaults; unknown keys are rejected. `train.seed` is the run seed that
/// prediction, explanation, and sampling also use.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub predict: PredictConfig,
    pub explain: ExplainConfig,
    pub bench: BenchConfig,
}

pub const DEFAULT_RHO: f64 = 0.6;

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("{}: invalid run configuration", path.display()))
    }

    /// Replaces both the dataset and the run seed.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.dataset.seed = s;
            self.train.seed = s;
        }
        self
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code: 0 success, 1 runtime or data error,
/// 2 usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .context("cannot build worker pool")?;
            pool.install(|| dispatch(cli.command))
        }
        None => dispatch(cli.command),
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => {
            let cfg = DatasetConfig {
                kind: a.dataset,
                n: a.n,
                seed: a.seed.unwrap_or(DatasetConfig::default().seed),
                rho: a.rho.unwrap_or(DEFAULT_RHO),
            };
            if a.rho.is_some() && a.dataset == DatasetKind::GwrR {
                bail!("--rho only applies to the sl-r dataset");
            }
            gen(&cfg, &a.out)
        }
        Command::Train(a) => {
            let cfg = match &a.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            let mut tc = cfg.train.clone();
            if let Some(s) = a.seed {
                tc.seed = s;
            }
            let loss = a.loss_out.unwrap_or_else(|| loss_path(&a.model_out));
            train(&a.data, &cfg.model, &tc, &a.model_out, &loss)
        }
        Command::Predict(a) => {
            let model = load_model(&a.model)?;
            let seed = a.seed.unwrap_or(model.train_config().seed);
            predict(&model, &a.data, a.members, a.expansion, seed, &a.out)
        }
        Command::Explain(a) => {
            let model = load_model(&a.model)?;
            let seed = a.seed.unwrap_or(model.train_config().seed);
            let cfg = ExplainConfig {
                background: a.background,
                instances: a.instances,
                members: a.members,
            };
            explain(&model, &a.data, &cfg, seed, &a.out)
        }
        Command::Bench(a) => {
            let model = load_model(&a.model)?;
            bench(&model, &a.data, &a.lengths, a.members, a.expansion, &a.out).map(drop)
        }
        Command::Reproduce(a) => {
            let cfg = match &a.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            }
            .with_seed(a.seed);
            reproduce(&cfg, &a.out_dir, !a.no_bench)
        }
    }
}

/// `model.json` → `model.loss.csv`.
pub fn loss_path(model_out: &Path) -> PathBuf {
    model_out.with_extension("loss.csv")
}

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    File::create(path).with_context(|| format!("cannot create {}", path.display()))
}

fn load_model(path: &Path) -> Result<TrainedModel> {
    Ok(TrainedModel::load(path)?)
}

fn load_data(path: &Path) -> Result<GeoDataset> {
    Ok(load_csv(path)?)
}

/// Rows of `data` whose ids are not in the model's context pool.
fn query_rows(model: &TrainedModel, data: &GeoDataset, path: &Path) -> Result<Vec<PointRecord>> {
    let ctx = model.context_pool()?;
    let rows: Vec<PointRecord> = data.points().iter().filter(|r| !ctx.contains(r.id)).cloned().collect();
    if rows.is_empty() {
        bail!("{}: every row is in the model's context pool, nothing to query", path.display());
    }
    Ok(rows)
}

pub fn gen(cfg: &DatasetConfig, out: &Path) -> Result<()> {
    let ds = match cfg.kind {
        DatasetKind::GwrR => generate_gwr(cfg.n, cfg.seed)?,
        DatasetKind::SlR => generate_sl(cfg.n, cfg.seed, cfg.rho)?,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    save_csv(&ds, out)?;
    Ok(())
}

pub fn train(data: &Path, model: &ModelConfig, cfg: &TrainConfig, model_out: &Path, loss_out: &Path) -> Result<()> {
    let ds = load_data(data)?;
    let (bundle, history, _) = fit(ds.points(), model, cfg)?;
    bundle.save(model_out)?;
    write_loss_history(create(loss_out)?, &history).with_context(|| format!("writing {}", loss_out.display()))?;
    if let Some(last) = history.last() {
        eprintln!("trained {} epochs, final mse {last:.6}", history.len());
    }
    Ok(())
}

pub fn predict(
    model: &TrainedModel,
    data: &Path,
    members: usize,
    expansion: Option<f64>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let ds = load_data(data)?;
    let rows = query_rows(model, &ds, data)?;
    let queries = QueryPool::new(rows.clone())?;
    let expansion = expansion.unwrap_or(model.train_config().expansion);
    let preds = predict_ensemble(model.params(), &queries, &model.context_pool()?, members, expansion, seed)?;
    write_predictions(create(out)?, &preds).with_context(|| format!("writing {}", out.display()))?;
    if rows.iter().all(|r| r.y.is_some()) {
        if let Ok(m) = evaluate(&preds, &rows) {
            eprintln!("{} queries: r2 {:.4}, mae {:.4}", preds.len(), m.r2, m.mae);
        }
    }
    Ok(())
}

pub fn explain(model: &TrainedModel, data: &Path, cfg: &ExplainConfig, seed: u64, out: &Path) -> Result<()> {
    let ds = load_data(data)?;
    let rows = query_rows(model, &ds, data)?;
    let instances = sample_background(&rows, cfg.instances, seed);
    let background = sample_background(model.context_points(), cfg.background, seed ^ 1);
    let predictor = make_shap_predictor(model, &instances, model.train_config().expansion, seed, cfg.members)?;
    let result = geoshapley_explain(&predictor, &instances, &background)?;
    let beta = local_coefficients(&result, &instances, &background)?;
    write_explanations(create(out)?, &result, &beta).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

pub fn bench(
    model: &TrainedModel,
    data: &Path,
    lengths: &[usize],
    members: usize,
    expansion: Option<f64>,
    out: &Path,
) -> Result<Vec<TimingRow>> {
    let ds = load_data(data)?;
    let queries = QueryPool::new(query_rows(model, &ds, data)?)?;
    let ctx = model.context_pool()?;
    let expansion = expansion.unwrap_or(model.train_config().expansion);
    let pre = benchmark_inference(model.params(), &queries, &ctx, lengths, members, expansion, CacheMode::Precomputed)?;
    let fly = benchmark_inference(model.params(), &queries, &ctx, lengths, members, expansion, CacheMode::OnTheFly)?;
    let total = |rows: &[TimingRow]| rows.iter().map(|r| r.seconds).sum::<f64>();
    let ratio = total(&pre) / total(&fly);
    let rows: Vec<TimingRow> = pre.into_iter().chain(fly).collect();
    write_timings(create(out)?, &rows, Some(ratio)).with_context(|| format!("writing {}", out.display()))?;
    Ok(rows)
}

/// File names written by `reproduce` inside its output directory.
pub mod outputs {
    pub const CONFIG: &str = "config.json";
    pub const DATA: &str = "data.csv";
    pub const MODEL: &str = "model.json";
    pub const LOSS: &str = "loss.csv";
    pub const PREDICTIONS: &str = "predictions.csv";
    pub const EXPLANATIONS: &str = "explanations.csv";
    pub const TIMINGS: &str = "timings.csv";
}

pub fn reproduce(cfg: &RunConfig, dir: &Path, with_bench: bool) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut f = create(&dir.join(outputs::CONFIG))?;
    writeln!(f, "{}", serde_json::to_string_pretty(cfg)?)?;
    let data = dir.join(outputs::DATA);
    let model_path = dir.join(outputs::MODEL);
    gen(&cfg.dataset, &data)?;
    train(&data, &cfg.model, &cfg.train, &model_path, &dir.join(outputs::LOSS))?;
    let model = load_model(&model_path)?;
    let seed = cfg.train.seed;
    predict(
        &model,
        &data,
        cfg.predict.members,
        cfg.predict.expansion,
        seed,
        &dir.join(outputs::PREDICTIONS),
    )?;
    explain(&model, &data, &cfg.explain, seed, &dir.join(outputs::EXPLANATIONS))?;
    if with_bench {
        bench(
            &model,
            &data,
            &cfg.bench.lengths,
            cfg.bench.members,
            cfg.predict.expansion,
            &dir.join(outputs::TIMINGS),
        )?;
    }
    Ok(())
}
