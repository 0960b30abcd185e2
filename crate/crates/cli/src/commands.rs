use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::json;

use rfit::corpus::{generate_database, generate_targets, load_database, load_targets, save_database, save_targets, split};
use rfit::deformnet::{evaluate_offset, inner_deformation_optimization, DeformNet};
use rfit::evalbench::{evaluate_arm, load_arm, retrieval_ranking, run_benchmark, write_csv, BenchRow, EvalTargets};
use rfit::geometry::io::{load_cloud, save_obj, save_ply};
use rfit::geometry::SpatialIndex;
use rfit::partmodel::{SourceShape, DEFAULT_TAU};
use rfit::retrieval::{RetrievalSpace, SamplingMode};
use rfit::trainer::{
    build_modules, joint_train, load_checkpoint, pretrain, save_checkpoint, JointState, RunLog, TrainConfig,
    TrainTargets,
};

use crate::options::{
    Cli, Command, EvalOptions, ExportOptions, FitOptions, GenOptions, PretrainOptions, TrainOptions,
};
use crate::UsageError;

/// Seed offset separating target generation from database generation.
const TARGET_SEED_MIX: u64 = 0x7a11;

struct Ctx {
    workdir: PathBuf,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }

    fn out_dir(&self, p: &Path) -> anyhow::Result<PathBuf> {
        let d = self.path(p);
        fs::create_dir_all(&d).with_context(|| format!("cannot create {}", d.display()))?;
        Ok(d)
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads(cli.threads)?;
    // config paths given on the command line resolve against the workdir too
    std::env::set_current_dir(&cli.workdir)
        .map_err(|e| UsageError(format!("cannot enter workdir {}: {e}", cli.workdir.display())))?;
    let ctx = Ctx { workdir: PathBuf::new() };
    match &cli.command {
        Command::Gen(a) => gen(&ctx, a.resolve()?),
        Command::Pretrain(a) => pretrain_cmd(&ctx, a.resolve()?),
        Command::Train(a) => train(&ctx, a.resolve()?),
        Command::Fit(a) => fit(&ctx, a.resolve()?),
        Command::Eval(a) => eval(&ctx, a.resolve()?),
        Command::Export(a) => export(&ctx, a.resolve()?),
    }
}

fn init_threads(flag: Option<usize>) -> anyhow::Result<()> {
    let threads = match flag {
        Some(n) => Some(n),
        None => match std::env::var("RF_THREADS") {
            Ok(v) => Some(v.parse().map_err(|_| UsageError(format!("RF_THREADS must be a count, got {v:?}")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(UsageError("thread count must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a, T> {
    rf_version: &'a str,
    command: &'a str,
    options: &'a T,
}

/// Writes the options that reproduce this run; `--config manifest.json`
/// replays them.
fn write_manifest<T: Serialize>(dir: &Path, command: &str, options: &T) -> anyhow::Result<()> {
    let m = Manifest {
        rf_version: env!("CARGO_PKG_VERSION"),
        command,
        options,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&m)? + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("cannot write {}", path.display()))
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitFile {
    train: Vec<usize>,
    test: Vec<usize>,
}

/// A generated data directory.
struct Data {
    db: Vec<SourceShape>,
    targets: Vec<rfit::corpus::TargetRecord>,
    split: SplitFile,
}

impl Data {
    fn load(dir: &Path) -> anyhow::Result<Self> {
        let db = load_database(&dir.join("database.json"), DEFAULT_TAU)?;
        let targets = load_targets(&dir.join("targets.json"))?;
        let split_path = dir.join("split.json");
        let split: SplitFile = match fs::read_to_string(&split_path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| rfit::Error::Parse {
                path: split_path.clone(),
                location: "$".into(),
                message: e.to_string(),
            })?,
            Err(_) => SplitFile {
                train: (0..targets.len()).collect(),
                test: Vec::new(),
            },
        };
        if let Some(&bad) = split.train.iter().chain(&split.test).find(|&&i| i >= targets.len()) {
            return Err(rfit::Error::InvalidConfig(format!("split index {bad} out of range")).into());
        }
        Ok(Self { db, targets, split })
    }

    fn train_targets(&self) -> TrainTargets {
        TrainTargets::new(self.split.train.iter().map(|&i| self.targets[i].cloud.clone()).collect())
    }

    fn test_targets(&self) -> anyhow::Result<EvalTargets> {
        if self.split.test.is_empty() {
            return Err(rfit::Error::EmptyDatabase).context("data has no test targets");
        }
        let ids = self.split.test.clone();
        let clouds = ids.iter().map(|&i| self.targets[i].cloud.clone()).collect();
        Ok(EvalTargets::new(ids, clouds))
    }
}

fn gen(ctx: &Ctx, o: GenOptions) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&o.train_fraction) {
        return Err(rfit::Error::InvalidConfig("train_fraction must lie in [0, 1]".into()).into());
    }
    let out = ctx.out_dir(&o.out)?;
    let db = generate_database(&o.spec, o.sources)?;
    let targets = generate_targets(&db, o.targets, o.offset_scale, o.noise_sigma, o.alpha, o.spec.seed ^ TARGET_SEED_MIX)?;
    let (train, test) = split(targets.len(), o.train_fraction, o.spec.seed);
    save_database(&out.join("database.json"), &db)?;
    save_targets(&out.join("targets.json"), &targets)?;
    write_json(&out.join("split.json"), &SplitFile { train, test })?;
    write_manifest(&out, "gen", &o)?;
    println!("wrote {} sources and {} targets to {}", db.len(), targets.len(), out.display());
    Ok(())
}

fn pretrain_cmd(ctx: &Ctx, o: PretrainOptions) -> anyhow::Result<()> {
    let cfg = &o.train;
    cfg.validate()?;
    let data = Data::load(&ctx.path(&o.data))?;
    cfg.validate_for(data.db.len())?;
    let out = ctx.out_dir(&o.out)?;
    let targets = data.train_targets();
    let (mut net, mut space) = build_modules(cfg, &data.db)?;
    let report = pretrain(&mut net, &data.db, &targets, cfg, &mut RunLog::in_dir(&out)?)?;
    println!(
        "pretrained deformation: {} steps, final window loss {:.6e}, converged {}",
        report.history.len(),
        report.history.last().copied().unwrap_or(f64::NAN),
        report.converged
    );
    if o.retrieval_epochs > 0 {
        let rc = TrainConfig {
            epochs: o.retrieval_epochs,
            sampling: SamplingMode::Uniform,
            freeze_deformation: true,
            use_ido: false,
            ..cfg.clone()
        };
        let mut state = JointState::default();
        let m = joint_train(&mut space, &mut net, &data.db, &targets, &rc, &mut state, &mut RunLog::in_dir(&out.join("retrieval"))?)?;
        if let Some(last) = m.last() {
            println!("trained retrieval: {} epochs, final L_emb {:.6e}", m.len(), last.l_emb);
        }
    }
    save_checkpoint(&out.join("pretrain.bin"), &net, &space, &JointState::default())?;
    write_manifest(&out, "pretrain", &o)?;
    println!("wrote {}", out.join("pretrain.bin").display());
    Ok(())
}

fn train(ctx: &Ctx, o: TrainOptions) -> anyhow::Result<()> {
    let cfg = &o.train;
    cfg.validate()?;
    let data = Data::load(&ctx.path(&o.data))?;
    cfg.validate_for(data.db.len())?;
    let out = ctx.out_dir(&o.out)?;
    let (mut net, mut space) = build_modules(cfg, &data.db)?;
    let mut state = match &o.init {
        Some(p) => load_checkpoint(&ctx.path(p), &mut net, &mut space)?,
        None => JointState::default(),
    };
    write_manifest(&out, "train", &o)?;
    let mut log = RunLog::in_dir(&out)?;
    let metrics = joint_train(&mut space, &mut net, &data.db, &data.train_targets(), cfg, &mut state, &mut log)?;
    match metrics.last() {
        Some(m) => println!(
            "trained {} epochs: L_emb {:.6e}, L_def {:.6e}, mean d_fit {:.6e}",
            metrics.len(),
            m.l_emb,
            m.l_def,
            m.mean_dfit
        ),
        None => println!("nothing to train: checkpoint is already at epoch {}", state.epoch),
    }
    println!("wrote {}", out.join("final.bin").display());
    Ok(())
}

/// Model settings and data directory recorded by the run that wrote
/// `checkpoint`, found in a manifest next to it or one directory up.
fn checkpoint_manifest(checkpoint: &Path) -> Option<(Option<TrainConfig>, Option<PathBuf>)> {
    let dir = checkpoint.parent()?;
    let found = [dir.join("manifest.json"), dir.parent()?.join("manifest.json")]
        .into_iter()
        .find(|p| p.is_file())?;
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(found).ok()?).ok()?;
    let options = v.get("options")?;
    let train = options
        .get("train")
        .or_else(|| options.get("bench").and_then(|b| b.get("train")))
        .and_then(|t| serde_json::from_value(t.clone()).ok());
    let data = options.get("data").and_then(|d| d.as_str()).map(PathBuf::from);
    Some((train, data))
}

/// Resolves the model config and data directory for a checkpoint, preferring
/// explicit options over its run manifest.
fn checkpoint_context(
    ctx: &Ctx,
    checkpoint: &Path,
    train: Option<TrainConfig>,
    data: Option<PathBuf>,
) -> anyhow::Result<(TrainConfig, PathBuf)> {
    let (m_train, m_data) = checkpoint_manifest(&ctx.path(checkpoint)).unwrap_or((None, None));
    let cfg = train.or(m_train).ok_or_else(|| {
        UsageError(format!(
            "no model settings for {}: pass a config with a [train] table or keep the run's manifest.json next to it",
            checkpoint.display()
        ))
    })?;
    let data = data
        .or(m_data)
        .ok_or_else(|| UsageError(format!("no data directory for {}: pass --data", checkpoint.display())))?;
    Ok((cfg, data))
}

fn load_modules(ctx: &Ctx, checkpoint: &Path, cfg: &TrainConfig, db: &[SourceShape]) -> anyhow::Result<(RetrievalSpace, DeformNet)> {
    let (mut net, mut space) = build_modules(cfg, db)?;
    load_checkpoint(&ctx.path(checkpoint), &mut net, &mut space)?;
    Ok((space, net))
}

#[derive(Serialize)]
struct FitOutput<'a> {
    retrieved: &'a [usize],
    report: &'a rfit::deformnet::FitReport,
    network_chamfer: f64,
    ido_iterations: Option<usize>,
}

fn fit(ctx: &Ctx, o: FitOptions) -> anyhow::Result<()> {
    let (cfg, data_dir) = checkpoint_context(ctx, &o.checkpoint, o.train.clone(), o.data.clone())?;
    let db = load_database(&ctx.path(&data_dir).join("database.json"), DEFAULT_TAU)?;
    let (space, net) = load_modules(ctx, &o.checkpoint, &cfg, &db)?;
    let target = load_cloud(&ctx.path(&o.target))?;
    let retrieved = match o.source {
        Some(s) if s >= db.len() => return Err(rfit::Error::UnknownSource(s).into()),
        Some(s) => vec![s],
        None => retrieval_ranking(&space, &target)?,
    };
    let source = retrieved[0];
    let shape = &db[source];
    let index = SpatialIndex::build(&target);
    let raw = net.predict_offset(source, shape, &target)?;
    let (mut cloud, mut report) = evaluate_offset(shape, source, 0, &index, raw.clone(), net.alpha, cfg.use_projection)?;
    let network_chamfer = report.post_chamfer;
    let mut ido_iterations = None;
    if o.ido {
        let refine = rfit::deformnet::IdoConfig {
            use_projection: cfg.use_projection,
            ..o.refine
        };
        let run = inner_deformation_optimization(shape, &index, &raw, net.alpha, &refine)?;
        ido_iterations = Some(run.iterations);
        let (c, r) = evaluate_offset(shape, source, 0, &index, run.offset, net.alpha, cfg.use_projection)?;
        if r.post_chamfer < report.post_chamfer {
            cloud = c;
            report = r;
        }
    }
    let out = ctx.out_dir(&o.out)?;
    let params = shape.default_params.offset_by(&report.projected_offset, net.alpha);
    save_obj(&out.join("deformed.obj"), &shape.deformed_mesh(&params))?;
    save_ply(&out.join("deformed.ply"), &cloud)?;
    write_json(
        &out.join("report.json"),
        &FitOutput {
            retrieved: &retrieved,
            report: &report,
            network_chamfer,
            ido_iterations,
        },
    )?;
    write_manifest(&out, "fit", &o)?;
    println!(
        "source {} ({}): chamfer {:.6e} before deformation, {:.6e} after",
        source, shape.name, report.pre_chamfer, report.post_chamfer
    );
    Ok(())
}

fn print_rows(rows: &[BenchRow]) {
    println!("{:>8} {:>6} {:>5} {:>12} {:>9} {:>8} {:>8}", "arm", "db", "seed", "top1", "rank", "r@1", "r@5");
    for r in rows {
        println!(
            "{:>8} {:>6} {:>5} {:>12.6e} {:>9.3} {:>8.3} {:>8.3}",
            r.arm, r.db_size, r.seed, r.top1, r.mean_rank, r.recall1, r.recall5
        );
    }
}

fn eval(ctx: &Ctx, o: EvalOptions) -> anyhow::Result<()> {
    let out = ctx.out_dir(&o.out)?;
    write_manifest(&out, "eval", &o)?;
    let mut per_target = Vec::new();
    let rows = match &o.checkpoints {
        None => {
            if o.data.is_some() {
                return Err(UsageError("--data needs --checkpoints".into()).into());
            }
            let mut rows = Vec::new();
            for (row, result) in run_benchmark(&o.bench, Some(&out))? {
                per_target.push(json!({"arm": row.arm, "db_size": row.db_size, "seed": row.seed,
                    "per_target": result.per_target}));
                rows.push(row);
            }
            rows
        }
        Some(ck) => {
            let ck_path = ctx.path(ck);
            let data_dir = o.data.clone().ok_or_else(|| UsageError("--checkpoints needs --data".into()))?;
            let data = Data::load(&ctx.path(&data_dir))?;
            let test = data.test_targets()?;
            let (m_train, _) = checkpoint_manifest(&ck_path.join("x")).unwrap_or((None, None));
            let cfg = m_train.unwrap_or_else(|| o.bench.train.clone());
            let bench = rfit::evalbench::BenchmarkConfig {
                train: cfg.clone(),
                ..o.bench.clone()
            };
            let mut rows = Vec::new();
            for &arm in &bench.arms {
                let t = std::time::Instant::now();
                // a single checkpoint file is evaluated under every requested arm protocol
                let modules = if ck_path.is_file() {
                    let m = checkpoint_manifest(&ck_path).and_then(|m| m.0).unwrap_or(cfg.clone());
                    load_modules(ctx, ck, &m, &data.db)?
                } else {
                    load_arm(&ck_path, arm, &cfg, &data.db)?
                };
                let r = evaluate_arm(arm, &modules, &data.db, &test, &bench)?;
                let row = BenchRow::new(arm, data.db.len(), cfg.seed, &r, t.elapsed().as_secs_f64());
                per_target.push(json!({"arm": row.arm, "db_size": row.db_size, "seed": row.seed,
                    "per_target": r.per_target}));
                rows.push(row);
            }
            rows
        }
    };
    write_csv(&out.join("results.csv"), &rows)?;
    write_json(&out.join("per_target.json"), &per_target)?;
    print_rows(&rows);
    Ok(())
}

#[derive(Serialize)]
struct Embedding {
    id: usize,
    name: String,
    code: Vec<f64>,
    variance: Vec<f64>,
    sigma: f64,
}

fn export(ctx: &Ctx, o: ExportOptions) -> anyhow::Result<()> {
    let db = load_database(&ctx.path(&o.data).join("database.json"), DEFAULT_TAU)?;
    let out = ctx.out_dir(&o.out)?;
    let shapes = out.join("sources");
    fs::create_dir_all(&shapes).with_context(|| format!("cannot create {}", shapes.display()))?;
    for (k, s) in db.iter().enumerate() {
        let stem = format!("{k:04}-{}", s.name);
        save_obj(&shapes.join(format!("{stem}.obj")), &s.deformed_mesh(&s.default_params))?;
        save_ply(&shapes.join(format!("{stem}.ply")), s.default_cloud())?;
    }
    if let Some(ck) = &o.checkpoint {
        let (cfg, _) = checkpoint_context(ctx, ck, o.train.clone(), Some(o.data.clone()))?;
        let (space, _) = load_modules(ctx, ck, &cfg, &db)?;
        let embeddings = (0..db.len())
            .map(|k| {
                Ok(Embedding {
                    id: k,
                    name: db[k].name.clone(),
                    code: space.source_code(k)?.to_vec(),
                    variance: space.variance(k)?,
                    sigma: space.sigma(k)?,
                })
            })
            .collect::<rfit::Result<Vec<_>>>()?;
        write_json(&out.join("embeddings.json"), &embeddings)?;
    }
    write_manifest(&out, "export", &o)?;
    println!("exported {} sources to {}", db.len(), out.display());
    Ok(())
}
