use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use rfit::corpus::GenSpec;
use rfit::deformnet::IdoConfig;
use rfit::evalbench::{Arm, BenchmarkConfig};
use rfit::retrieval::SamplingMode;
use rfit::trainer::TrainConfig;

use crate::UsageError;

#[derive(Debug, Parser)]
#[command(name = "rf", version, about = "Deformation-aware retrieval and part-based fitting")]
pub struct Cli {
    /// Directory all relative paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// Worker threads; falls back to RF_THREADS, then the number of cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic source database and planted targets.
    Gen(GenArgs),
    /// Pretrain the deformation module on random pairs, then the retrieval
    /// module against it.
    Pretrain(PretrainArgs),
    /// Joint alternating training.
    Train(TrainArgs),
    /// Retrieve and deform a source for one target cloud.
    Fit(FitArgs),
    /// Evaluate arms from checkpoints, or run the full benchmark.
    Eval(EvalArgs),
    /// Write source meshes, clouds and retrieval embeddings.
    Export(ExportArgs),
}

/// Reads options from a TOML file, or from the `options` of a manifest
/// written by an earlier run.
pub fn load_options<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        #[derive(Deserialize)]
        struct Manifest<T> {
            options: T,
        }
        let m: Manifest<T> = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("bad manifest {}: {e}", path.display())))?;
        Ok(m.options)
    } else {
        toml::from_str(&text).map_err(|e| UsageError(format!("bad config {}: {e}", path.display())).into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenOptions {
    pub out: PathBuf,
    pub sources: usize,
    pub targets: usize,
    pub offset_scale: f64,
    pub noise_sigma: f64,
    pub train_fraction: f64,
    pub alpha: f64,
    pub spec: GenSpec,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            out: "data".into(),
            sources: 20,
            targets: 200,
            offset_scale: 1.0,
            noise_sigma: 0.002,
            train_fraction: 0.8,
            alpha: rfit::deformnet::DEFAULT_ALPHA,
            spec: GenSpec::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub sources: Option<usize>,
    #[arg(long)]
    pub targets: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub offset_scale: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl GenArgs {
    pub fn resolve(&self) -> anyhow::Result<GenOptions> {
        let mut o: GenOptions = load_options(self.config.as_deref())?;
        set(&mut o.sources, self.sources);
        set(&mut o.targets, self.targets);
        set(&mut o.spec.seed, self.seed);
        set(&mut o.spec.points_per_shape, self.points);
        set(&mut o.offset_scale, self.offset_scale);
        set(&mut o.noise_sigma, self.noise);
        set(&mut o.out, self.out.clone());
        Ok(o)
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Flags shared by the training commands, applied over the config file.
#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub sigma0: Option<f64>,
    #[arg(long, value_parser = parse_sampling)]
    pub sampling: Option<SamplingMode>,
    /// Enable direct optimization with distillation during training.
    #[arg(long)]
    pub ido: bool,
    /// Disable the connectivity projection.
    #[arg(long)]
    pub no_projection: bool,
    /// Start from the compact single-core profile instead of the full-scale
    /// defaults (before the config file is applied).
    #[arg(long)]
    pub desk: bool,
}

fn parse_sampling(s: &str) -> Result<SamplingMode, String> {
    match s {
        "biased" => Ok(SamplingMode::Biased),
        "uniform" => Ok(SamplingMode::Uniform),
        _ => Err(format!("expected biased or uniform, got {s}")),
    }
}

impl TrainFlags {
    pub fn apply(&self, t: &mut TrainConfig) {
        set(&mut t.seed, self.seed);
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.lr, self.lr);
        set(&mut t.k, self.k);
        set(&mut t.sigma0, self.sigma0);
        set(&mut t.sampling, self.sampling);
        if self.ido {
            t.use_ido = true;
        }
        if self.no_projection {
            t.use_projection = false;
        }
    }
}

/// Loads a training-command config, seeding it with the desk profile when
/// asked; config files then override, and flags override both.
fn load_train_options<T: DeserializeOwned + Serialize + Default>(
    config: Option<&Path>,
    desk: bool,
    train: impl Fn(&mut T) -> &mut TrainConfig,
) -> anyhow::Result<T> {
    if !desk {
        return load_options(config);
    }
    let mut base = T::default();
    *train(&mut base) = TrainConfig::desk();
    let Some(path) = config else { return Ok(base) };
    // fields missing from the file keep the desk values
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    let file: toml::Value =
        toml::from_str(&text).map_err(|e| UsageError(format!("bad config {}: {e}", path.display())))?;
    let mut merged = toml::Value::try_from(&base)?;
    merge(&mut merged, file);
    merged
        .try_into()
        .map_err(|e: toml::de::Error| UsageError(format!("bad config {}: {e}", path.display())).into())
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainOptions {
    pub data: PathBuf,
    pub out: PathBuf,
    /// Retrieval-only epochs against the frozen pretrained deformation
    /// module; 0 leaves the retrieval module untrained.
    pub retrieval_epochs: usize,
    pub train: TrainConfig,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            data: "data".into(),
            out: "pretrain".into(),
            retrieval_epochs: 20,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub retrieval_epochs: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
}

impl PretrainArgs {
    pub fn resolve(&self) -> anyhow::Result<PretrainOptions> {
        let mut o: PretrainOptions =
            load_train_options(self.config.as_deref(), self.train.desk, |o: &mut PretrainOptions| &mut o.train)?;
        set(&mut o.data, self.data.clone());
        set(&mut o.out, self.out.clone());
        set(&mut o.train.pretrain.steps, self.steps);
        set(&mut o.retrieval_epochs, self.retrieval_epochs);
        self.train.apply(&mut o.train);
        Ok(o)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub data: PathBuf,
    pub out: PathBuf,
    /// Checkpoint to start from, usually written by `pretrain`.
    pub init: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            data: "data".into(),
            out: "run".into(),
            init: None,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

impl TrainArgs {
    pub fn resolve(&self) -> anyhow::Result<TrainOptions> {
        let mut o: TrainOptions =
            load_train_options(self.config.as_deref(), self.train.desk, |o: &mut TrainOptions| &mut o.train)?;
        set(&mut o.data, self.data.clone());
        set(&mut o.out, self.out.clone());
        if self.init.is_some() {
            o.init = self.init.clone();
        }
        self.train.apply(&mut o.train);
        Ok(o)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub checkpoint: PathBuf,
    pub target: PathBuf,
    pub out: PathBuf,
    /// Database directory; taken from the checkpoint's run manifest if unset.
    pub data: Option<PathBuf>,
    /// Fit this source instead of the top retrieved one.
    pub source: Option<usize>,
    /// Refine the prediction by direct optimization.
    pub ido: bool,
    pub refine: IdoConfig,
    /// Model configuration; taken from the checkpoint's run manifest if unset.
    pub train: Option<TrainConfig>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            checkpoint: "run/final.bin".into(),
            target: "target.ply".into(),
            out: "fit".into(),
            data: None,
            source: None,
            ido: false,
            refine: IdoConfig::default(),
            train: None,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Target point cloud (.ply or .json).
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub source: Option<usize>,
    #[arg(long)]
    pub ido: bool,
}

impl FitArgs {
    pub fn resolve(&self) -> anyhow::Result<FitOptions> {
        let mut o: FitOptions = load_options(self.config.as_deref())?;
        set(&mut o.checkpoint, self.checkpoint.clone());
        set(&mut o.target, self.target.clone());
        set(&mut o.out, self.out.clone());
        if self.data.is_some() {
            o.data = self.data.clone();
        }
        if self.source.is_some() {
            o.source = self.source;
        }
        if self.ido {
            o.ido = true;
        }
        Ok(o)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub out: PathBuf,
    /// Evaluate existing arm checkpoints from this directory against `data`
    /// instead of generating and training.
    pub checkpoints: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub bench: BenchmarkConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            out: "eval".into(),
            checkpoints: None,
            data: None,
            bench: BenchmarkConfig::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated arm names (static, dar+df, uniform, ours, ours_ido, ours+do).
    #[arg(long, value_delimiter = ',')]
    pub arms: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    pub db_sizes: Option<Vec<usize>>,
}

impl EvalArgs {
    pub fn resolve(&self) -> anyhow::Result<EvalOptions> {
        let mut o: EvalOptions = load_options(self.config.as_deref())?;
        set(&mut o.out, self.out.clone());
        if self.checkpoints.is_some() {
            o.checkpoints = self.checkpoints.clone();
        }
        if self.data.is_some() {
            o.data = self.data.clone();
        }
        if let Some(arms) = &self.arms {
            o.bench.arms = arms
                .iter()
                .map(|a| a.parse::<Arm>().map_err(|e| UsageError(e.to_string())))
                .collect::<Result<_, _>>()?;
        }
        set(&mut o.bench.seeds, self.seeds.clone());
        set(&mut o.bench.db_sizes, self.db_sizes.clone());
        Ok(o)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportOptions {
    pub data: PathBuf,
    pub out: PathBuf,
    /// Also write the retrieval embeddings of this checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub train: Option<TrainConfig>,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self {
            data: "data".into(),
            out: "export".into(),
            checkpoint: None,
            train: None,
        }
    }
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

impl ExportArgs {
    pub fn resolve(&self) -> anyhow::Result<ExportOptions> {
        let mut o: ExportOptions = load_options(self.config.as_deref())?;
        set(&mut o.data, self.data.clone());
        set(&mut o.out, self.out.clone());
        if self.checkpoint.is_some() {
            o.checkpoint = self.checkpoint.clone();
        }
        Ok(o)
    }
}
