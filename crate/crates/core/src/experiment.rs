//! Experiment configuration and the drivers behind the command line:
//! training runs, sampling, evaluation and figure output.
//!
//! Every random draw comes from a ChaCha stream derived from the config
//! seed, one stream per purpose, so adding evaluation snapshots never
//! perturbs the training trajectory.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Activation;
use crate::baseline_fm::{FmConfig, FmModel};
use crate::checkpoint::{self, Checkpoint, ModelKind};
use crate::data::{make_target, sample_coupling_batch, DatasetSpec, SourceSpec, TargetSet};
use crate::error::{Result, TfmError};
use crate::eval::{self, residual_sweep, sliced_w2, sweep_grid, MetricReport, Panel, SweepCell};
use crate::flowcore::{sample_time_pair, CouplingBatch, TimePair, TimeSamplerConfig};
use crate::nets::{ConditioningMode, Label, ParamMode, TfmConfig, TfmModel, TimeEmbedConfig};
use crate::objectives::{divergence_guard, fm_loss, tfm_loss, Adam, AdamConfig, Ema, LossConfig, LossReport};
use crate::oracles::AtomTarget;
use crate::params::Params;
use crate::sampling::{euler_grid_trajectory, fmt_f64, sample_multistep, TimeGrid, Trajectory};
use crate::tensor::Tensor;

/// All bundled datasets are planar.
pub const DATA_DIM: usize = 2;

/// Version tag of the JSON record stored in checkpoints.
pub const RECORD_FORMAT: u32 = 1;

const STREAM_INIT: u64 = 0;
const STREAM_DATA: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_PROJECT: u64 = 4;
const STREAM_SAMPLE: u64 = 5;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// `<crate version>[-<git describe>]`.
pub fn version() -> String {
    let describe = env!("TFM_GIT_DESCRIBE");
    if describe.is_empty() {
        env!("CARGO_PKG_VERSION").to_string()
    } else {
        format!("{}-{describe}", env!("CARGO_PKG_VERSION"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Objective {
    #[default]
    #[serde(rename = "TFM")]
    Tfm,
    #[serde(rename = "FM")]
    Fm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
    pub time_embed: TimeEmbedConfig,
    pub cond_mode: ConditioningMode,
    pub param_mode: ParamMode,
    pub zero_init_final: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let base = TfmConfig::default();
        Self {
            hidden_sizes: base.hidden_sizes,
            activation: base.activation,
            time_embed: base.time_embed,
            cond_mode: base.cond_mode,
            param_mode: base.param_mode,
            zero_init_final: true,
        }
    }
}

impl ModelSection {
    pub fn tfm_config(&self, n_classes: usize) -> TfmConfig {
        TfmConfig {
            data_dim: DATA_DIM,
            hidden_sizes: self.hidden_sizes.clone(),
            activation: self.activation,
            time_embed: self.time_embed,
            cond_mode: self.cond_mode,
            param_mode: self.param_mode,
            n_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub steps: usize,
    pub batch: usize,
    /// 0 keeps the raw weights.
    pub ema_decay: f64,
    /// Progress line interval on stderr.
    pub log_every: usize,
    /// Snapshot interval for sliced-W2 metrics; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            betas: adam.betas,
            eps: adam.eps,
            steps: 50_000,
            batch: 128,
            ema_decay: 0.999,
            log_every: 1000,
            eval_every: 0,
        }
    }
}

impl OptimizerSection {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, betas: self.betas, eps: self.eps }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub steps: usize,
    /// Explicit knots; overrides `steps`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cfg_scale: Option<f64>,
    pub n: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self { steps: 1, grid: None, cfg_scale: None, n: 2000 }
    }
}

impl SamplingSection {
    pub fn time_grid(&self) -> Result<TimeGrid> {
        match &self.grid {
            Some(k) => TimeGrid::new(k.clone()).map_err(|e| TfmError::config("sampling.grid", e.to_string())),
            None => TimeGrid::uniform(self.steps).map_err(|e| TfmError::config("sampling.steps", e.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Sampling step counts reported at each snapshot.
    pub steps: Vec<usize>,
    pub n_samples: usize,
    pub n_projections: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { steps: vec![1, 2, 5], n_samples: 2000, n_projections: eval::DEFAULT_PROJECTIONS }
    }
}

/// A complete, seeded experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub objective: Objective,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub source: SourceSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub time_sampler: TimeSamplerConfig,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// Default settings for `dataset` with the given seed.
    pub fn new(seed: u64, dataset: DatasetSpec) -> Self {
        Self {
            seed,
            objective: Objective::default(),
            dataset,
            source: SourceSpec::default(),
            model: ModelSection::default(),
            loss: LossConfig::default(),
            time_sampler: TimeSamplerConfig::default(),
            optimizer: OptimizerSection::default(),
            sampling: SamplingSection::default(),
            eval: EvalSection::default(),
        }
    }

    /// Parses and validates. Errors carry the dotted key that failed.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let key = if key == "." { "<root>".to_string() } else { key };
            TfmError::config(key, e.inner().message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TfmError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| TfmError::Contract(format!("config does not serialize: {e}")))
    }

    /// JSON with sorted keys; independent of the key order of the source file.
    pub fn canonical_json(&self) -> Result<String> {
        let value = serde_json::to_value(self).map_err(|e| TfmError::Contract(e.to_string()))?;
        Ok(value.to_string())
    }

    /// Hex SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }

    pub fn n_classes(&self) -> usize {
        self.dataset.n_classes
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.source.validate()?;
        self.model.tfm_config(self.n_classes()).validate()?;
        self.loss.validate()?;
        self.time_sampler.validate()?;
        self.optimizer.adam().validate()?;
        let opt = &self.optimizer;
        if opt.batch == 0 {
            return Err(TfmError::config("optimizer.batch", "must be positive"));
        }
        if !(0.0..1.0).contains(&opt.ema_decay) {
            return Err(TfmError::config("optimizer.ema_decay", "must lie in [0, 1)"));
        }
        if opt.log_every == 0 {
            return Err(TfmError::config("optimizer.log_every", "must be positive"));
        }
        self.sampling.time_grid()?;
        if self.sampling.n == 0 {
            return Err(TfmError::config("sampling.n", "must be positive"));
        }
        if let Some(w) = self.sampling.cfg_scale {
            if !w.is_finite() {
                return Err(TfmError::config("sampling.cfg_scale", "must be finite"));
            }
            if self.n_classes() == 0 {
                return Err(TfmError::config("sampling.cfg_scale", "guidance needs dataset.n_classes > 0"));
            }
        }
        if self.eval.steps.is_empty() || self.eval.steps.contains(&0) {
            return Err(TfmError::config("eval.steps", "must list positive step counts"));
        }
        if self.eval.n_samples == 0 {
            return Err(TfmError::config("eval.n_samples", "must be positive"));
        }
        if self.eval.n_projections == 0 {
            return Err(TfmError::config("eval.n_projections", "must be positive"));
        }
        Ok(())
    }
}

/// A trained network of either family.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Tfm(TfmModel),
    Fm(FmModel),
}

impl TrainedModel {
    /// Freshly initialized network for `cfg`.
    pub fn init(cfg: &ExperimentConfig) -> Result<Self> {
        let mut rng = stream(cfg.seed, STREAM_INIT);
        let tfm = cfg.model.tfm_config(cfg.n_classes());
        Ok(match cfg.objective {
            Objective::Tfm => TrainedModel::Tfm(TfmModel::new(tfm, cfg.model.zero_init_final, &mut rng)?),
            Objective::Fm => {
                TrainedModel::Fm(FmModel::new(FmConfig::matching(&tfm), cfg.model.zero_init_final, &mut rng)?)
            }
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::Tfm(_) => ModelKind::Tfm,
            TrainedModel::Fm(_) => ModelKind::Fm,
        }
    }

    pub fn params(&self) -> &Params {
        match self {
            TrainedModel::Tfm(m) => m.params(),
            TrainedModel::Fm(m) => m.params(),
        }
    }

    pub fn set_params(&mut self, params: Params) -> Result<()> {
        match self {
            TrainedModel::Tfm(m) => m.set_params(params),
            TrainedModel::Fm(m) => m.set_params(params),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            TrainedModel::Tfm(m) => m.n_classes(),
            TrainedModel::Fm(m) => m.n_classes(),
        }
    }

    pub fn data_dim(&self) -> usize {
        match self {
            TrainedModel::Tfm(m) => m.data_dim(),
            TrainedModel::Fm(m) => m.data_dim(),
        }
    }

    /// Transition models jump between knots; velocity models take Euler
    /// steps between them.
    pub fn generate(
        &self,
        x0: &Tensor,
        grid: &TimeGrid,
        classes: Option<&[usize]>,
        cfg_scale: Option<f64>,
    ) -> Result<(Tensor, Trajectory)> {
        match self {
            TrainedModel::Tfm(m) => sample_multistep(m, x0, grid, classes, cfg_scale),
            TrainedModel::Fm(m) => {
                if x0.rank() != 2 || x0.cols() != m.data_dim() {
                    return Err(TfmError::Shape(format!("batch {:?} for dimension {}", x0.shape(), m.data_dim())));
                }
                let n = x0.rows();
                let cond: Option<Vec<Label>> = classes.map(|c| c.iter().map(|&c| Some(c)).collect());
                if cond.as_ref().is_some_and(|c| c.len() != n) {
                    return Err(TfmError::Shape(format!("class ids for {n} points expected")));
                }
                if cfg_scale.is_some() && cond.is_none() {
                    return Err(TfmError::Precondition("guidance needs class ids".into()));
                }
                if cfg_scale.is_some() && m.n_classes() == 0 {
                    return Err(TfmError::Unsupported("guidance needs a class-conditional model".into()));
                }
                let null = vec![None; n];
                let field = |x: &Tensor, t: f64| -> Result<Tensor> {
                    let times = vec![t; n];
                    let v = m.forward(x, &times, cond.as_deref())?;
                    match cfg_scale {
                        Some(w) if w != 1.0 => {
                            let u = m.forward(x, &times, Some(&null))?;
                            v.zip_map(&u, |c, u| w * c + (1.0 - w) * u)
                        }
                        _ => Ok(v),
                    }
                };
                euler_grid_trajectory(&field, x0, grid)
            }
        }
    }
}

/// JSON record stored next to the weights in a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelRecord {
    format: u32,
    model: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    experiment: Option<ExperimentConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

pub fn save_model(path: &Path, model: &TrainedModel, experiment: Option<&ExperimentConfig>) -> Result<()> {
    let to_json = |v: serde_json::Result<serde_json::Value>| v.map_err(|e| TfmError::Contract(e.to_string()));
    let record = ModelRecord {
        format: RECORD_FORMAT,
        model: match model {
            TrainedModel::Tfm(m) => to_json(serde_json::to_value(m.config()))?,
            TrainedModel::Fm(m) => to_json(serde_json::to_value(m.config()))?,
        },
        experiment: experiment.cloned(),
        config_hash: experiment.map(ExperimentConfig::hash).transpose()?,
    };
    let config = serde_json::to_string(&record).map_err(|e| TfmError::Contract(e.to_string()))?;
    checkpoint::save(path, &Checkpoint { kind: model.kind(), params: model.params().clone(), config })
}

#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub model: TrainedModel,
    pub experiment: Option<ExperimentConfig>,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let ckpt = checkpoint::load(path)?;
    let bad = |m: String| TfmError::Checkpoint { offset: 0, message: m };
    let record: ModelRecord = serde_json::from_str(&ckpt.config).map_err(|e| bad(format!("config record: {e}")))?;
    if record.format != RECORD_FORMAT {
        return Err(bad(format!("record format {} (expected {RECORD_FORMAT})", record.format)));
    }
    let model = match ckpt.kind {
        ModelKind::Tfm => {
            let cfg: TfmConfig = serde_json::from_value(record.model).map_err(|e| bad(format!("model config: {e}")))?;
            TrainedModel::Tfm(TfmModel::from_params(cfg, ckpt.params)?)
        }
        ModelKind::Fm => {
            let cfg: FmConfig = serde_json::from_value(record.model).map_err(|e| bad(format!("model config: {e}")))?;
            TrainedModel::Fm(FmModel::from_params(cfg, ckpt.params)?)
        }
    };
    Ok(LoadedModel { model, experiment: record.experiment })
}

/// The target cloud of an experiment; identical across runs with one seed.
pub fn build_target(cfg: &ExperimentConfig) -> Result<TargetSet> {
    make_target(&cfg.dataset, cfg.dataset.n_points, &mut stream(cfg.seed, STREAM_DATA))
}

#[derive(Debug, Clone, Copy)]
pub struct Progress {
    pub step: usize,
    pub steps: usize,
    pub report: LossReport,
}

/// Sliced-W2 of generated samples at one sampling step count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub sampling_steps: usize,
    pub sliced_w2: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// EMA weights.
    pub model: TrainedModel,
    pub losses: Vec<(usize, LossReport)>,
    pub snapshots: Vec<Snapshot>,
    pub target: TargetSet,
}

fn relabel(e: TfmError, step: usize) -> TfmError {
    match e {
        TfmError::Divergence { report, .. } => TfmError::Divergence { step, report },
        other => other,
    }
}

/// Runs the optimization loop of `cfg` in memory.
pub fn train(cfg: &ExperimentConfig, mut progress: impl FnMut(&Progress)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let target = build_target(cfg)?;
    let mut model = TrainedModel::init(cfg)?;
    let mut adam = Adam::new(cfg.optimizer.adam(), model.params());
    let mut ema = Ema::new(cfg.optimizer.ema_decay, model.params())?;
    let mut rng = stream(cfg.seed, STREAM_TRAIN);
    let steps = cfg.optimizer.steps;
    let batch = cfg.optimizer.batch;
    let mut losses = Vec::with_capacity(steps);
    let mut snapshots = Vec::new();

    for step in 1..=steps {
        let coupling = sample_coupling_batch(&cfg.source, &target, batch, &mut rng)?;
        let pairs: Vec<TimePair> = (0..batch).map(|_| sample_time_pair(&cfg.time_sampler, &mut rng)).collect();
        let (report, grads) = match &model {
            TrainedModel::Tfm(m) => tfm_loss(m, &coupling, &pairs, &cfg.loss, &mut rng),
            TrainedModel::Fm(m) => {
                let times: Vec<f64> = pairs.iter().map(TimePair::t).collect();
                fm_loss(m, &coupling, &times, &cfg.loss, &mut rng)
            }
        }
        .map_err(|e| relabel(e, step))?;
        divergence_guard(step, &report)?;
        let mut params = model.params().clone();
        adam.update(&mut params, &grads)?;
        ema.update(&params)?;
        model.set_params(params)?;
        losses.push((step, report));
        progress(&Progress { step, steps, report });

        if cfg.optimizer.eval_every > 0 && step % cfg.optimizer.eval_every == 0 && step < steps {
            let mut averaged = model.clone();
            averaged.set_params(ema.weights().clone())?;
            snapshots.extend(snapshot(&averaged, cfg, &target, step)?);
        }
    }
    model.set_params(ema.into_weights())?;
    snapshots.extend(snapshot(&model, cfg, &target, steps)?);
    Ok(TrainOutcome { model, losses, snapshots, target })
}

fn snapshot(model: &TrainedModel, cfg: &ExperimentConfig, target: &TargetSet, step: usize) -> Result<Vec<Snapshot>> {
    cfg.eval
        .steps
        .iter()
        .map(|&k| {
            let m = eval_sliced_w2(model, cfg, &target.points, k, cfg.seed)?;
            Ok(Snapshot { step, sampling_steps: k, sliced_w2: m.value })
        })
        .collect()
}

/// Class ids for `n` samples: all `class`, or round-robin over the classes
/// of a conditional model.
pub fn class_ids(n_classes: usize, n: usize, class: Option<usize>) -> Result<Option<Vec<usize>>> {
    match class {
        Some(c) if c >= n_classes => Err(TfmError::Index(format!("class {c} of {n_classes}"))),
        Some(c) => Ok(Some(vec![c; n])),
        None if n_classes > 0 => Ok(Some((0..n).map(|i| i % n_classes).collect())),
        None => Ok(None),
    }
}

/// Draws `n` source points from the sampling stream of `seed` and pushes
/// them through `model`.
pub fn generate_from_source(
    model: &TrainedModel,
    source: &SourceSpec,
    n: usize,
    grid: &TimeGrid,
    classes: Option<&[usize]>,
    cfg_scale: Option<f64>,
    seed: u64,
) -> Result<(Tensor, Trajectory)> {
    let x0 = source.sample(n, model.data_dim(), &mut stream(seed, STREAM_SAMPLE))?;
    model.generate(&x0, grid, classes, cfg_scale)
}

/// Sliced-W2 between `k`-step samples and `reference`, with the config's
/// guidance scale and evaluation sizes.
pub fn eval_sliced_w2(
    model: &TrainedModel,
    cfg: &ExperimentConfig,
    reference: &Tensor,
    k: usize,
    seed: u64,
) -> Result<MetricReport> {
    let n = cfg.eval.n_samples;
    let classes = class_ids(model.n_classes(), n, None)?;
    let scale = if classes.is_some() { cfg.sampling.cfg_scale } else { None };
    let x0 = cfg.source.sample(n, model.data_dim(), &mut stream(seed, STREAM_EVAL))?;
    let (generated, _) = model.generate(&x0, &TimeGrid::uniform(k)?, classes.as_deref(), scale)?;
    let value = sliced_w2(&generated, reference, cfg.eval.n_projections, &mut stream(seed, STREAM_PROJECT))?;
    Ok(MetricReport { name: format!("sliced_w2@{k}"), value, n_samples: n, seed })
}

/// Exclusive claim on an output directory; released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub const FILE: &'static str = ".tfm.lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| TfmError::io(dir, e))?;
        let path = dir.join(Self::FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(TfmError::io(
                &path,
                io::Error::new(io::ErrorKind::AlreadyExists, "output directory is in use by another run"),
            )),
            Err(e) => Err(TfmError::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub checkpoint: PathBuf,
    pub metrics: Vec<MetricReport>,
    pub version: String,
    pub steps: usize,
    pub wall_clock_secs: f64,
}

pub const CHECKPOINT_FILE: &str = "model.tfm1";
pub const LOSS_FILE: &str = "loss.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| TfmError::io(path, e))
}

pub fn write_loss_csv<W: Write>(out: W, losses: &[(usize, LossReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "weighted_loss", "raw_mse", "mean_weight", "target_norm"])?;
    for (step, r) in losses {
        w.write_record([
            step.to_string(),
            fmt_f64(r.weighted_loss),
            fmt_f64(r.raw_mse),
            fmt_f64(r.mean_weight),
            fmt_f64(r.target_norm),
        ])?;
    }
    w.flush().map_err(|e| TfmError::io("<loss csv>", e))?;
    Ok(())
}

pub fn write_snapshots_csv<W: Write>(out: W, snapshots: &[Snapshot]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "sampling_steps", "sliced_w2"])?;
    for s in snapshots {
        w.write_record([s.step.to_string(), s.sampling_steps.to_string(), fmt_f64(s.sliced_w2)])?;
    }
    w.flush().map_err(|e| TfmError::io("<metrics csv>", e))?;
    Ok(())
}

/// Trains the experiment at `config_path` into `out_dir`.
pub fn run_train(config_path: &Path, out_dir: &Path) -> Result<RunManifest> {
    let cfg = ExperimentConfig::load(config_path)?;
    let _lock = OutputLock::acquire(out_dir)?;
    let started = Instant::now();
    let every = cfg.optimizer.log_every;
    let outcome = train(&cfg, |p| {
        if p.step % every == 0 || p.step == p.steps {
            eprintln!(
                "step {}/{}  loss {:.4e}  mse {:.4e}  {:.1}s",
                p.step,
                p.steps,
                p.report.weighted_loss,
                p.report.raw_mse,
                started.elapsed().as_secs_f64()
            );
        }
    })?;

    let ckpt = out_dir.join(CHECKPOINT_FILE);
    save_model(&ckpt, &outcome.model, Some(&cfg))?;
    let loss_path = out_dir.join(LOSS_FILE);
    write_loss_csv(create(&loss_path)?, &outcome.losses)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    write_snapshots_csv(create(&metrics_path)?, &outcome.snapshots)?;
    eval::write_text(&out_dir.join(CONFIG_FILE), &cfg.to_toml()?)?;

    let metrics = outcome
        .snapshots
        .iter()
        .filter(|s| s.step == cfg.optimizer.steps)
        .map(|s| MetricReport {
            name: format!("sliced_w2@{}", s.sampling_steps),
            value: s.sliced_w2,
            n_samples: cfg.eval.n_samples,
            seed: cfg.seed,
        })
        .collect();
    let manifest = RunManifest {
        config_hash: cfg.hash()?,
        checkpoint: ckpt,
        metrics,
        version: version(),
        steps: cfg.optimizer.steps,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| TfmError::Contract(e.to_string()))?;
    eval::write_text(&out_dir.join(MANIFEST_FILE), &(json + "\n"))?;
    Ok(manifest)
}

/// Options of [`run_sample`]; unset fields fall back to the sampling
/// section stored in the checkpoint.
#[derive(Debug, Clone, Default)]
pub struct SampleRequest {
    pub grid: Option<TimeGrid>,
    pub n: Option<usize>,
    pub cfg_scale: Option<f64>,
    pub class: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub samples: PathBuf,
    pub trajectory: PathBuf,
    pub panel: PathBuf,
    pub n: usize,
    pub grid: TimeGrid,
}

pub const SAMPLES_FILE: &str = "samples.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const PANEL_FILE: &str = "panel.svg";

fn steps_title(grid: &TimeGrid) -> String {
    format!("steps={}", grid.intervals())
}

pub fn run_sample(ckpt: &Path, req: &SampleRequest, out_dir: &Path) -> Result<SampleOutput> {
    let loaded = load_model(ckpt)?;
    let defaults = loaded.experiment.as_ref().map(|e| e.sampling.clone()).unwrap_or_default();
    let grid = match &req.grid {
        Some(g) => g.clone(),
        None => defaults.time_grid()?,
    };
    let n = req.n.unwrap_or(defaults.n);
    if n == 0 {
        return Err(TfmError::Precondition("sample count must be positive".into()));
    }
    let model = &loaded.model;
    let classes = class_ids(model.n_classes(), n, req.class)?;
    let scale = if classes.is_some() { req.cfg_scale.or(defaults.cfg_scale) } else { req.cfg_scale };
    let source = loaded.experiment.as_ref().map(|e| e.source).unwrap_or_default();
    let (points, traj) = generate_from_source(model, &source, n, &grid, classes.as_deref(), scale, req.seed)?;

    fs::create_dir_all(out_dir).map_err(|e| TfmError::io(out_dir, e))?;
    let samples = out_dir.join(SAMPLES_FILE);
    crate::sampling::write_samples_csv(create(&samples)?, &points, classes.as_deref())?;
    let trajectory = out_dir.join(TRAJECTORY_FILE);
    traj.write_csv(create(&trajectory)?)?;
    let target = match &loaded.experiment {
        Some(e) => Some(build_target(e)?.points),
        None => None,
    };
    let panel = out_dir.join(PANEL_FILE);
    eval::write_panel_svg(&[Panel { title: steps_title(&grid), trajectory: &traj, target: target.as_ref() }], &panel)?;
    Ok(SampleOutput { samples, trajectory, panel, n, grid })
}

/// Side-by-side panels, one per step count, from shared source points.
pub fn run_plot(ckpt: &Path, steps: &[usize], n: usize, seed: u64, out: &Path) -> Result<()> {
    if steps.is_empty() {
        return Err(TfmError::Precondition("no step counts to plot".into()));
    }
    let loaded = load_model(ckpt)?;
    let model = &loaded.model;
    let classes = class_ids(model.n_classes(), n, None)?;
    let scale = loaded.experiment.as_ref().and_then(|e| e.sampling.cfg_scale).filter(|_| classes.is_some());
    let source = loaded.experiment.as_ref().map(|e| e.source).unwrap_or_default();
    let mut trajectories = Vec::with_capacity(steps.len());
    for &k in steps {
        let grid = TimeGrid::uniform(k)?;
        trajectories.push((
            steps_title(&grid),
            generate_from_source(model, &source, n, &grid, classes.as_deref(), scale, seed)?.1,
        ));
    }
    let target = match &loaded.experiment {
        Some(e) => Some(build_target(e)?.points),
        None => None,
    };
    let panels: Vec<Panel> = trajectories
        .iter()
        .map(|(title, traj)| Panel { title: title.clone(), trajectory: traj, target: target.as_ref() })
        .collect();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| TfmError::io(parent, e))?;
    }
    eval::write_panel_svg(&panels, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    SlicedW2,
    IdentityResidual,
}

impl std::str::FromStr for Metric {
    type Err = TfmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sliced_w2" => Ok(Metric::SlicedW2),
            "identity_residual" => Ok(Metric::IdentityResidual),
            other => Err(TfmError::Precondition(format!(
                "unknown metric `{other}` (expected sliced_w2 or identity_residual)"
            ))),
        }
    }
}

/// Atoms and sample pairs used by the residual metric.
const RESIDUAL_ATOMS: usize = 128;
const RESIDUAL_SAMPLES: usize = 128;
pub const RESIDUAL_FILE: &str = "residuals.csv";

/// Evaluates a checkpoint against the target of its own experiment.
/// `sliced_w2` reports one value per step count; `identity_residual`
/// sweeps a 10 x 10 `(t, r)` grid against the empirical target and writes
/// the cells to `out_dir` when given.
pub fn run_eval(
    ckpt: &Path,
    metric: Metric,
    steps: &[usize],
    n: Option<usize>,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<Vec<MetricReport>> {
    let loaded = load_model(ckpt)?;
    let mut exp = loaded
        .experiment
        .clone()
        .ok_or_else(|| TfmError::Precondition("checkpoint carries no experiment config".into()))?;
    if let Some(n) = n {
        exp.eval.n_samples = n;
    }
    let target = build_target(&exp)?;
    match metric {
        Metric::SlicedW2 => {
            if steps.is_empty() {
                return Err(TfmError::Precondition("no step counts to evaluate".into()));
            }
            steps.iter().map(|&k| eval_sliced_w2(&loaded.model, &exp, &target.points, k, seed)).collect()
        }
        Metric::IdentityResidual => {
            let TrainedModel::Tfm(model) = &loaded.model else {
                return Err(TfmError::Unsupported("identity residuals need a transition model".into()));
            };
            let cells = empirical_residuals(model, &exp, &target, seed)?;
            if let Some(dir) = out_dir {
                fs::create_dir_all(dir).map_err(|e| TfmError::io(dir, e))?;
                eval::write_sweep_csv(create(&dir.join(RESIDUAL_FILE))?, &cells)?;
            }
            let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len().max(1) as f64;
            let cond = mean(cells.iter().map(|c| c.residual_cond).collect());
            let ode = mean(cells.iter().filter_map(|c| c.residual_ode).collect());
            Ok(vec![
                MetricReport { name: "identity_residual_cond".into(), value: cond, n_samples: RESIDUAL_SAMPLES, seed },
                MetricReport { name: "identity_residual_ode".into(), value: ode, n_samples: RESIDUAL_SAMPLES, seed },
            ])
        }
    }
}

/// Residual sweep with a subsample of the target as the atom oracle.
fn empirical_residuals(
    model: &TfmModel,
    exp: &ExperimentConfig,
    target: &TargetSet,
    seed: u64,
) -> Result<Vec<SweepCell>> {
    let k = RESIDUAL_ATOMS.min(target.len());
    let atoms = target.points.select_rows(&(0..k).collect::<Vec<_>>());
    let oracle = AtomTarget::uniform(atoms.clone())?;
    let mut rng = stream(seed, STREAM_EVAL);
    let x0 = exp.source.sample(RESIDUAL_SAMPLES, DATA_DIM, &mut rng)?;
    let idx: Vec<usize> = (0..RESIDUAL_SAMPLES).map(|i| i % k).collect();
    let samples = CouplingBatch { x0, x1: atoms.select_rows(&idx), labels: vec![None; RESIDUAL_SAMPLES] };
    residual_sweep(model, &oracle, &sweep_grid(10, 10)?, &samples)
}
