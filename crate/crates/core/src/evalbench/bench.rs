use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalResult, EvalTargets, Ranker};
use crate::corpus::{generate_database, generate_targets, split, GenSpec, TargetRecord};
use crate::deformnet::{DeformNet, IdoConfig};
use crate::error::{Error, Result};
use crate::partmodel::SourceShape;
use crate::retrieval::{RetrievalSpace, SamplingMode};
use crate::trainer::{
    build_modules, joint_train, load_checkpoint, pretrain, save_checkpoint, JointState, RunLog, TrainConfig,
    TrainTargets,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Arm {
    /// Nearest source by undeformed chamfer, deformed by the pretrained network.
    #[serde(rename = "static")]
    Static,
    /// Retrieval trained against the frozen pretrained deformation network.
    #[serde(rename = "dar+df")]
    DarDf,
    #[serde(rename = "uniform")]
    Uniform,
    #[serde(rename = "ours")]
    Ours,
    #[serde(rename = "ours_ido")]
    OursIdo,
    /// Joint model with test-time direct optimization.
    #[serde(rename = "ours+do")]
    OursDo,
}

impl Arm {
    pub const ALL: [Arm; 6] = [Arm::Static, Arm::DarDf, Arm::Uniform, Arm::Ours, Arm::OursIdo, Arm::OursDo];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Static => "static",
            Arm::DarDf => "dar+df",
            Arm::Uniform => "uniform",
            Arm::Ours => "ours",
            Arm::OursIdo => "ours_ido",
            Arm::OursDo => "ours+do",
        }
    }

    /// Checkpoint holding the modules the arm is evaluated with.
    pub fn checkpoint_file(self) -> &'static str {
        match self {
            Arm::Static => "pretrain.bin",
            Arm::DarDf => "dar.bin",
            Arm::Uniform => "uniform.bin",
            Arm::Ours | Arm::OursDo => "ours.bin",
            Arm::OursIdo => "ours_ido.bin",
        }
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown arm {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub db_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub targets: usize,
    pub points_per_shape: usize,
    pub train_fraction: f64,
    pub offset_scale: f64,
    pub noise_sigma: f64,
    pub arms: Vec<Arm>,
    /// Epochs of retrieval-only training for the frozen-deformation arm,
    /// which also initializes the joint arms.
    pub dar_epochs: usize,
    pub dar_sampling: SamplingMode,
    /// Test-time direct optimization settings.
    pub refine: IdoConfig,
    pub train: TrainConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            db_sizes: vec![20],
            seeds: vec![0, 1, 2],
            targets: 200,
            points_per_shape: 512,
            train_fraction: 0.8,
            offset_scale: 1.0,
            noise_sigma: 0.002,
            arms: vec![Arm::Static, Arm::DarDf, Arm::Uniform, Arm::Ours, Arm::OursDo],
            dar_epochs: 15,
            dar_sampling: SamplingMode::Uniform,
            refine: IdoConfig::default(),
            train: TrainConfig::desk(),
        }
    }
}

/// A generated corpus and its train/test split.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub db: Vec<SourceShape>,
    pub targets: Vec<TargetRecord>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ExperimentData {
    pub fn generate(cfg: &BenchmarkConfig, db_size: usize, seed: u64) -> Result<Self> {
        let spec = GenSpec {
            points_per_shape: cfg.points_per_shape,
            tau: 0.05,
            seed,
            ..GenSpec::default()
        };
        let db = generate_database(&spec, db_size)?;
        let targets = generate_targets(&db, cfg.targets, cfg.offset_scale, cfg.noise_sigma, cfg.train.alpha, seed ^ 0x7a11)?;
        let (train, test) = split(targets.len(), cfg.train_fraction, seed);
        Ok(Self { db, targets, train, test })
    }

    pub fn train_targets(&self) -> TrainTargets {
        TrainTargets::new(self.train.iter().map(|&i| self.targets[i].cloud.clone()).collect())
    }

    pub fn test_targets(&self) -> EvalTargets {
        EvalTargets::new(self.test.clone(), self.test.iter().map(|&i| self.targets[i].cloud.clone()).collect())
    }
}

/// Trained modules of every arm of one experiment.
#[derive(Debug, Clone)]
pub struct ArmModels {
    /// Pretrained deformation network with the untrained retrieval space.
    pub pretrained: (RetrievalSpace, DeformNet),
    pub dar: Option<(RetrievalSpace, DeformNet)>,
    pub ours: Option<(RetrievalSpace, DeformNet)>,
    pub uniform: Option<(RetrievalSpace, DeformNet)>,
    pub ours_ido: Option<(RetrievalSpace, DeformNet)>,
    /// Training seconds per checkpoint file.
    pub train_seconds: Vec<(String, f64)>,
}

impl ArmModels {
    pub fn modules(&self, arm: Arm) -> Result<&(RetrievalSpace, DeformNet)> {
        let m = match arm {
            Arm::Static => Some(&self.pretrained),
            Arm::DarDf => self.dar.as_ref(),
            Arm::Ours | Arm::OursDo => self.ours.as_ref(),
            Arm::Uniform => self.uniform.as_ref(),
            Arm::OursIdo => self.ours_ido.as_ref(),
        };
        m.ok_or_else(|| Error::Checkpoint(format!("arm {} was not trained", arm.name())))
    }

    fn seconds(&self, arm: Arm) -> f64 {
        let file = arm.checkpoint_file();
        self.train_seconds.iter().find(|(f, _)| f == file).map_or(0.0, |(_, s)| *s)
    }
}

fn phase_log(out: Option<&Path>, name: &str) -> Result<RunLog> {
    match out {
        Some(d) => RunLog::in_dir(&d.join(name)),
        None => Ok(RunLog::disabled()),
    }
}

fn save(out: Option<&Path>, file: &str, m: &(RetrievalSpace, DeformNet), state: &JointState) -> Result<()> {
    if let Some(d) = out {
        save_checkpoint(&d.join(file), &m.1, &m.0, state)?;
    }
    Ok(())
}

/// Pretrains the deformation network, trains the frozen-deformation
/// retrieval arm on top of it, then the joint arms from both, writing one
/// checkpoint per arm into `out` when given.
pub fn train_arms(
    db: &[SourceShape],
    targets: &TrainTargets,
    bench: &BenchmarkConfig,
    seed: u64,
    arms: &[Arm],
    out: Option<&Path>,
) -> Result<ArmModels> {
    let cfg = TrainConfig {
        seed,
        ..bench.train.clone()
    };
    let mut seconds = Vec::new();
    let t0 = Instant::now();
    let (mut net, space) = build_modules(&cfg, db)?;
    pretrain(&mut net, db, targets, &cfg, &mut phase_log(out, "pretrain")?)?;
    let pretrained = (space, net);
    save(out, Arm::Static.checkpoint_file(), &pretrained, &JointState::default())?;
    seconds.push((Arm::Static.checkpoint_file().to_string(), t0.elapsed().as_secs_f64()));

    let needs_joint = arms.iter().any(|a| !matches!(a, Arm::Static));
    let mut models = ArmModels {
        pretrained,
        dar: None,
        ours: None,
        uniform: None,
        ours_ido: None,
        train_seconds: Vec::new(),
    };
    if !needs_joint {
        models.train_seconds = seconds;
        return Ok(models);
    }
    let t1 = Instant::now();
    let dar_cfg = TrainConfig {
        epochs: bench.dar_epochs,
        sampling: bench.dar_sampling,
        freeze_deformation: true,
        use_ido: false,
        ..cfg.clone()
    };
    let mut dar = models.pretrained.clone();
    let mut state = JointState::default();
    joint_train(&mut dar.0, &mut dar.1, db, targets, &dar_cfg, &mut state, &mut phase_log(out, "dar")?)?;
    save(out, Arm::DarDf.checkpoint_file(), &dar, &state)?;
    seconds.push((Arm::DarDf.checkpoint_file().to_string(), seconds[0].1 + t1.elapsed().as_secs_f64()));
    let base = seconds[1].1;

    let joint = |sampling: SamplingMode, use_ido: bool, name: &str| -> Result<((RetrievalSpace, DeformNet), f64)> {
        let t = Instant::now();
        let jc = TrainConfig {
            sampling,
            use_ido,
            ..cfg.clone()
        };
        let mut m = dar.clone();
        let mut state = JointState::default();
        joint_train(&mut m.0, &mut m.1, db, targets, &jc, &mut state, &mut phase_log(out, name)?)?;
        save(out, &format!("{name}.bin"), &m, &state)?;
        Ok((m, base + t.elapsed().as_secs_f64()))
    };
    if arms.iter().any(|a| matches!(a, Arm::Ours | Arm::OursDo)) {
        let (m, s) = joint(SamplingMode::Biased, false, "ours")?;
        models.ours = Some(m);
        seconds.push(("ours.bin".into(), s));
    }
    if arms.contains(&Arm::Uniform) {
        let (m, s) = joint(SamplingMode::Uniform, false, "uniform")?;
        models.uniform = Some(m);
        seconds.push(("uniform.bin".into(), s));
    }
    if arms.contains(&Arm::OursIdo) {
        let (m, s) = joint(SamplingMode::Biased, true, "ours_ido")?;
        models.ours_ido = Some(m);
        seconds.push(("ours_ido.bin".into(), s));
    }
    models.dar = Some(dar);
    models.train_seconds = seconds;
    Ok(models)
}

/// Rebuilds an arm's modules from its checkpoint in `dir`.
pub fn load_arm(dir: &Path, arm: Arm, cfg: &TrainConfig, db: &[SourceShape]) -> Result<(RetrievalSpace, DeformNet)> {
    let path: PathBuf = dir.join(arm.checkpoint_file());
    if !path.exists() {
        return Err(Error::Checkpoint(format!("missing checkpoint {}", path.display())));
    }
    let (mut net, mut space) = build_modules(cfg, db)?;
    load_checkpoint(&path, &mut net, &mut space)?;
    Ok((space, net))
}

/// Evaluates one arm on the test targets.
pub fn evaluate_arm(
    arm: Arm,
    modules: &(RetrievalSpace, DeformNet),
    db: &[SourceShape],
    test: &EvalTargets,
    bench: &BenchmarkConfig,
) -> Result<EvalResult> {
    let (space, net) = modules;
    let ranker = match arm {
        Arm::Static => Ranker::Static,
        _ => Ranker::Learned(space),
    };
    let refine = IdoConfig {
        use_projection: bench.train.use_projection,
        ..bench.refine
    };
    let refine = matches!(arm, Arm::OursDo).then_some(&refine);
    evaluate(db, net, &ranker, test, bench.train.use_projection, refine)
}

/// One row of the benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub arm: String,
    pub db_size: usize,
    pub seed: u64,
    pub top1: f64,
    pub top2: Option<f64>,
    pub top3: Option<f64>,
    pub top4: Option<f64>,
    pub top5: Option<f64>,
    pub mean_rank: f64,
    pub recall1: f64,
    pub recall5: f64,
    pub wall_seconds: f64,
}

impl BenchRow {
    pub fn new(arm: Arm, db_size: usize, seed: u64, r: &EvalResult, wall_seconds: f64) -> Self {
        let t = &r.summary.topk_chamfer;
        Self {
            arm: arm.name().to_string(),
            db_size,
            seed,
            top1: t[0],
            top2: t.get(1).copied(),
            top3: t.get(2).copied(),
            top4: t.get(3).copied(),
            top5: t.get(4).copied(),
            mean_rank: r.summary.mean_rank,
            recall1: r.summary.recall1,
            recall5: r.summary.recall5,
            wall_seconds,
        }
    }
}

/// Generates, trains and evaluates every (db size, seed) combination; each
/// row's wall time covers training of its checkpoint plus its evaluation.
/// Checkpoints go to `out/{db_size}-{seed}/` when `out` is given.
pub fn run_benchmark(bench: &BenchmarkConfig, out: Option<&Path>) -> Result<Vec<(BenchRow, EvalResult)>> {
    bench.train.validate()?;
    let mut rows = Vec::new();
    for &size in &bench.db_sizes {
        for &seed in &bench.seeds {
            bench.train.validate_for(size)?;
            let data = ExperimentData::generate(bench, size, seed)?;
            let dir = out.map(|d| d.join(format!("{size}-{seed}")));
            let models = train_arms(&data.db, &data.train_targets(), bench, seed, &bench.arms, dir.as_deref())?;
            let test = data.test_targets();
            for &arm in &bench.arms {
                let t = Instant::now();
                let r = evaluate_arm(arm, models.modules(arm)?, &data.db, &test, bench)?;
                let wall = models.seconds(arm) + t.elapsed().as_secs_f64();
                rows.push((BenchRow::new(arm, size, seed, &r, wall), r));
            }
        }
    }
    rows.sort_by(|a, b| (a.0.db_size, a.0.seed, &a.0.arm).cmp(&(b.0.db_size, b.0.seed, &b.0.arm)));
    Ok(rows)
}

pub fn write_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}
