//! Pretraining on random pairs and the alternating joint training loop of
//! the retrieval and deformation modules.

mod config;
mod state;

pub use config::{PretrainConfig, TrainConfig};
pub use state::{load_checkpoint, save_checkpoint, Checkpoint, RunLog};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::deformnet::{
    backward_candidates, evaluate_candidates, ido_distillation_loss, inner_deformation_optimization,
    CandidateEval, DeformNet,
};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, SpatialIndex};
use crate::partmodel::{DeformationParams, FitOptions, SourceShape};
use crate::retrieval::{embedding_loss, sample_candidates, CandidateSet, RetrievalSpace};
use crate::tensornet::Gradients;

const STREAM_MODULES: u64 = 1;
const STREAM_PRETRAIN: u64 = 2;
const STREAM_SHUFFLE: u64 = 3 << 32;
const STREAM_SAMPLE: u64 = 4 << 48;

/// Training targets with their nearest-neighbour indices.
#[derive(Debug, Clone)]
pub struct TrainTargets {
    pub clouds: Vec<PointCloud>,
    pub index: Vec<SpatialIndex>,
}

impl TrainTargets {
    pub fn new(clouds: Vec<PointCloud>) -> Self {
        let index = clouds.par_iter().map(SpatialIndex::build).collect();
        Self { clouds, index }
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }
}

/// Freshly initialized modules for `db`, seeded from `cfg.seed`.
pub fn build_modules(cfg: &TrainConfig, db: &[SourceShape]) -> Result<(DeformNet, RetrievalSpace)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_MODULES);
    let net = DeformNet::new(&cfg.deform_config(), db, &mut rng)?;
    let space = RetrievalSpace::new(&cfg.retrieval, db, &mut rng)?;
    Ok((net, space))
}

/// Retrieval distances `d_R(s, t)` over all (source, training target) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceCache {
    /// Rows are sources, columns targets.
    pub d: Array2<f64>,
    /// Epoch at which the cache was built.
    pub stamp: usize,
}

impl DistanceCache {
    pub fn needs_refresh(&self, epoch: usize, every: usize) -> bool {
        epoch.saturating_sub(self.stamp) >= every
    }

    pub fn column(&self, target: usize) -> Vec<f64> {
        self.d.column(target).to_vec()
    }
}

/// Refreshes the cached source codes from the current encoder, then
/// recomputes every source-to-target distance.
pub fn refresh_cache(
    space: &mut RetrievalSpace,
    db: &[SourceShape],
    targets: &[PointCloud],
    epoch: usize,
) -> Result<DistanceCache> {
    space.refresh_source_codes(db)?;
    let space = &*space;
    let cols = targets
        .par_iter()
        .map(|t| space.all_distances(&space.encode_target(t)?))
        .collect::<Result<Vec<_>>>()?;
    let mut d = Array2::zeros((db.len(), targets.len()));
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            d[[i, j]] = *v;
        }
    }
    Ok(DistanceCache { d, stamp: epoch })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean loss of every step.
    pub history: Vec<f64>,
    pub converged: bool,
}

fn check_data(db: &[SourceShape], targets: &TrainTargets) -> Result<()> {
    if db.is_empty() || targets.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    Ok(())
}

fn check_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} is {v}")))
    }
}

/// Trains the deformation module on uniformly random (source, target)
/// pairs, minimizing chamfer plus the weighted symmetry loss.
pub fn pretrain(
    net: &mut DeformNet,
    db: &[SourceShape],
    targets: &TrainTargets,
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<PretrainReport> {
    cfg.validate()?;
    check_data(db, targets)?;
    let pc = &cfg.pretrain;
    let sgd = cfg.pretrain_sgd();
    let opts = FitOptions {
        use_projection: cfg.use_projection,
        symmetry_weight: cfg.symmetry_weight,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_PRETRAIN);
    let mut history = Vec::with_capacity(pc.steps);
    let mut converged = false;
    for step in 0..pc.steps {
        let pairs: Vec<(usize, usize)> = (0..pc.batch_size)
            .map(|_| (rng.gen_range(0..db.len()), rng.gen_range(0..targets.len())))
            .collect();
        let scale = 1.0 / pairs.len() as f64;
        let net_ref = &*net;
        let parts = pairs
            .par_iter()
            .map(|&(s, t)| {
                let mut g = Gradients::for_store(&net_ref.store);
                let cache = net_ref.encode_target(targets.clouds[t].points())?;
                let evals = evaluate_candidates(net_ref, db, &cache, &targets.index[t], &[s], opts)?;
                let d: Vec<f64> = evals[0].fit.grad.iter().map(|v| v * scale).collect();
                backward_candidates(net_ref, &cache, &evals, &[d], &mut g)?;
                Ok((evals[0].fit.loss, g))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads = Gradients::for_store(&net.store);
        let mut loss = 0.0;
        for (l, g) in &parts {
            loss += l * scale;
            grads.merge(g);
        }
        if let Err(e) = check_finite("pretraining loss", loss) {
            log.event(json!({"event": "abort", "phase": "pretrain", "step": step, "loss": loss.to_string()}))?;
            return Err(e);
        }
        net.store.accumulate(&grads);
        net.store.sgd_step(&sgd);
        history.push(loss);
        let w = pc.window;
        if history.len() >= 2 * w {
            let n = history.len();
            let recent: f64 = history[n - w..].iter().sum::<f64>() / w as f64;
            let before: f64 = history[n - 2 * w..n - w].iter().sum::<f64>() / w as f64;
            if (before - recent).abs() < pc.tol {
                converged = true;
                break;
            }
        }
    }
    log.pretrain_history(&history)?;
    log.event(json!({"event": "pretrain_done", "steps": history.len(), "converged": converged,
        "final_loss": history.last().copied()}))?;
    Ok(PretrainReport { history, converged })
}

/// Per-target work shared by the two alternating updates of one iteration.
#[derive(Debug, Clone)]
pub struct TargetWork {
    pub candidates: CandidateSet,
    pub evals: Vec<CandidateEval>,
    /// Fitting distances used by the embedding loss: post-deformation chamfer,
    /// or the chamfer after direct optimization when that is enabled.
    pub d_fit: Vec<f64>,
    /// Directly optimized offsets, one per candidate, when enabled.
    pub optimized: Option<Vec<DeformationParams>>,
    target_code: crate::tensornet::EncoderCache,
}

fn sample_rng(seed: u64, epoch: usize, target: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_SAMPLE | ((epoch as u64) << 24) | target as u64);
    rng
}

/// Samples candidates from the cached distances and deforms each of them.
pub fn prepare_batch(
    net: &DeformNet,
    db: &[SourceShape],
    targets: &TrainTargets,
    cache: &DistanceCache,
    batch: &[usize],
    epoch: usize,
    cfg: &TrainConfig,
) -> Result<Vec<TargetWork>> {
    let opts = FitOptions {
        use_projection: cfg.use_projection,
        symmetry_weight: cfg.symmetry_weight,
    };
    let ido = crate::deformnet::IdoConfig {
        max_iters: cfg.ido_budget,
        use_projection: cfg.use_projection,
        ..cfg.ido
    };
    batch
        .par_iter()
        .map(|&t| {
            let mut rng = sample_rng(cfg.seed, epoch, t);
            let candidates = sample_candidates(t, &cache.column(t), cfg.sigma0, cfg.k, cfg.sampling, &mut rng)?;
            let target_code = net.encode_target(targets.clouds[t].points())?;
            let evals = evaluate_candidates(net, db, &target_code, &targets.index[t], &candidates.sources, opts)?;
            let (d_fit, optimized) = if cfg.use_ido {
                let runs = candidates
                    .sources
                    .iter()
                    .zip(&evals)
                    .map(|(&s, e)| inner_deformation_optimization(&db[s], &targets.index[t], &e.forward.offset, net.alpha, &ido))
                    .collect::<Result<Vec<_>>>()?;
                (
                    runs.iter().map(|r| r.chamfer).collect(),
                    Some(runs.into_iter().map(|r| r.offset).collect()),
                )
            } else {
                (evals.iter().map(|e| e.fit.chamfer).collect(), None)
            };
            Ok(TargetWork {
                candidates,
                evals,
                d_fit,
                optimized,
                target_code,
            })
        })
        .collect()
}

/// Embedding-loss update of the retrieval module; returns the mean loss and
/// the per-candidate retrieval probabilities (before the update) that weight
/// the deformation loss. Candidate source codes are encoded live so their
/// gradients reach the encoder.
pub fn retrieval_step(
    space: &mut RetrievalSpace,
    db: &[SourceShape],
    targets: &TrainTargets,
    work: &[TargetWork],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let scale = 1.0 / work.len() as f64;
    let sp = &*space;
    let mut used: Vec<usize> = work.iter().flat_map(|w| w.candidates.sources.iter().copied()).collect();
    used.sort_unstable();
    used.dedup();
    let src_caches = used
        .par_iter()
        .map(|&k| sp.encoder.forward(&sp.store, db[k].default_cloud().points()))
        .collect::<Result<Vec<_>>>()?;
    let codes: Vec<Vec<f64>> = src_caches.iter().map(|c| c.output().to_vec()).collect();
    let slot = |k: usize| used.binary_search(&k).expect("candidate encoded");
    let parts = work
        .par_iter()
        .map(|w| {
            let mut g = Gradients::for_store(&sp.store);
            let cache = sp.encoder.forward(&sp.store, targets.clouds[w.candidates.target].points())?;
            let refs: Vec<&[f64]> = w.candidates.sources.iter().map(|&k| codes[slot(k)].as_slice()).collect();
            let e = embedding_loss(sp, &cache, &w.candidates.sources, &refs, &w.d_fit, cfg.sigma0, &mut g)?;
            Ok((e, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = Gradients::for_store(&space.store);
    let mut d_codes = vec![vec![0.0; space.dim()]; used.len()];
    let mut loss = 0.0;
    let mut weights = Vec::with_capacity(parts.len());
    for ((e, g), w) in parts.into_iter().zip(work) {
        loss += e.loss * scale;
        grads.merge(&g);
        for (&k, d) in w.candidates.sources.iter().zip(&e.d_source_codes) {
            d_codes[slot(k)].iter_mut().zip(d).for_each(|(a, b)| *a += b);
        }
        weights.push(e.p_retrieval);
    }
    check_finite("embedding loss", loss)?;
    if cfg.freeze_retrieval {
        return Ok((loss, weights));
    }
    let src_grads = src_caches
        .par_iter()
        .zip(&d_codes)
        .map(|(c, d)| {
            let mut g = Gradients::for_store(&sp.store);
            sp.encoder.backward(&sp.store, c, d, &mut g)?;
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    for g in &src_grads {
        grads.merge(g);
    }
    grads.scale(scale);
    space.store.accumulate(&grads);
    space.store.sgd_step(&cfg.retrieval_sgd());
    Ok((loss, weights))
}

/// Weighted deformation-loss update (plus distillation toward the directly
/// optimized offsets when enabled); returns the mean loss.
pub fn deformation_step(net: &mut DeformNet, work: &[TargetWork], weights: &[Vec<f64>], cfg: &TrainConfig) -> Result<f64> {
    if weights.len() != work.len() {
        return Err(Error::DimensionMismatch {
            expected: work.len(),
            got: weights.len(),
        });
    }
    let scale = 1.0 / work.len() as f64;
    let n = &*net;
    let parts = work
        .par_iter()
        .zip(weights)
        .map(|(w, wt)| {
            let mut loss = 0.0;
            let mut d = Vec::with_capacity(w.evals.len());
            for (c, e) in w.evals.iter().enumerate() {
                let mut dc: Vec<f64> = e.fit.grad.iter().map(|g| g * wt[c]).collect();
                loss += wt[c] * e.fit.loss;
                if let Some(opt) = &w.optimized {
                    let (l, gd) = ido_distillation_loss(&e.forward.offset, &opt[c])?;
                    loss += cfg.ido_weight * wt[c] * l;
                    dc.iter_mut().zip(&gd).for_each(|(a, b)| *a += cfg.ido_weight * wt[c] * b);
                }
                d.push(dc);
            }
            let mut g = Gradients::for_store(&n.store);
            backward_candidates(n, &w.target_code, &w.evals, &d, &mut g)?;
            Ok((loss, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = Gradients::for_store(&net.store);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l * scale;
        grads.merge(g);
    }
    check_finite("deformation loss", loss)?;
    if !cfg.freeze_deformation {
        grads.scale(scale);
        net.store.accumulate(&grads);
        net.store.sgd_step(&cfg.deform_sgd());
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_emb: f64,
    pub l_def: f64,
    pub mean_dfit: f64,
}

/// Resumable position of a joint run.
#[derive(Debug, Clone, Default)]
pub struct JointState {
    /// Next epoch to run.
    pub epoch: usize,
    pub cache: Option<DistanceCache>,
}

/// Deterministic shuffled visiting order of the training targets in `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_SHUFFLE | epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Runs joint epochs from `state.epoch` up to `cfg.epochs`, alternating a
/// retrieval update and a deformation update on every batch.
pub fn joint_train(
    space: &mut RetrievalSpace,
    net: &mut DeformNet,
    db: &[SourceShape],
    targets: &TrainTargets,
    cfg: &TrainConfig,
    state: &mut JointState,
    log: &mut RunLog,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate_for(db.len())?;
    check_data(db, targets)?;
    let mut metrics = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let stale = state
            .cache
            .as_ref()
            .map_or(true, |c| c.needs_refresh(epoch, cfg.cache_refresh_epochs));
        if stale {
            state.cache = Some(refresh_cache(space, db, &targets.clouds, epoch)?);
            log.event(json!({"event": "cache_refresh", "epoch": epoch}))?;
        }
        let cache = state.cache.as_ref().expect("cache built");
        let order = epoch_order(cfg.seed, epoch, targets.len());
        let (mut l_emb, mut l_def, mut dfit, mut n_dfit) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let outcome = (|| {
                let work = prepare_batch(net, db, targets, cache, batch, epoch, cfg)?;
                let (le, weights) = retrieval_step(space, db, targets, &work, cfg)?;
                let ld = deformation_step(net, &work, &weights, cfg)?;
                Ok::<_, Error>((work, le, ld))
            })();
            let (work, le, ld) = match outcome {
                Ok(v) => v,
                Err(e @ Error::Numerical(_)) => {
                    let path = log.checkpoint_path("abort.bin");
                    if let Some(p) = &path {
                        save_checkpoint(p, net, space, state)?;
                    }
                    log.event(json!({"event": "abort", "phase": "joint", "epoch": epoch,
                        "batch": batch, "error": e.to_string(),
                        "checkpoint": path.is_some().then_some("abort.bin")}))?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let b = batch.len() as f64;
            l_emb += le * b;
            l_def += ld * b;
            for w in &work {
                dfit += w.d_fit.iter().sum::<f64>();
                n_dfit += w.d_fit.len();
            }
        }
        let n = targets.len() as f64;
        let m = EpochMetrics {
            epoch,
            l_emb: l_emb / n,
            l_def: l_def / n,
            mean_dfit: dfit / n_dfit as f64,
        };
        state.epoch += 1;
        log.metric(&m)?;
        log.event(json!({"event": "epoch", "epoch": epoch, "l_emb": m.l_emb, "l_def": m.l_def,
            "mean_dfit": m.mean_dfit}))?;
        if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 && state.epoch < cfg.epochs {
            if let Some(p) = log.checkpoint_path(&format!("epoch-{:04}.bin", state.epoch)) {
                save_checkpoint(&p, net, space, state)?;
            }
        }
        metrics.push(m);
    }
    space.refresh_source_codes(db)?;
    if let Some(p) = log.checkpoint_path("final.bin") {
        save_checkpoint(&p, net, space, state)?;
        log.event(json!({"event": "checkpoint", "file": "final.bin", "epoch": state.epoch}))?;
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_database, generate_targets, GenSpec};
    use crate::deformnet::DeformConfig;
    use crate::retrieval::{soft_probabilities, RetrievalConfig, SamplingMode};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            k: 2,
            pretrain: PretrainConfig {
                steps: 20,
                batch_size: 4,
                ..TrainConfig::desk().pretrain
            },
            deform: DeformConfig {
                point_widths: vec![16, 32],
                target_code_dim: 16,
                global_code_dim: 8,
                part_code_dim: 8,
                hidden: vec![32],
                ..DeformConfig::default()
            },
            retrieval: RetrievalConfig {
                point_widths: vec![16, 32],
                code_dim: 8,
                ..TrainConfig::desk().retrieval
            },
            ..TrainConfig::desk()
        }
    }

    fn corpus(sources: usize, targets: usize, offset_scale: f64, seed: u64) -> (Vec<SourceShape>, TrainTargets, Vec<usize>) {
        let spec = GenSpec {
            points_per_shape: 128,
            seed,
            ..GenSpec::default()
        };
        let db = generate_database(&spec, sources).unwrap();
        let recs = generate_targets(&db, targets, offset_scale, 0.0, 0.1, seed + 1).unwrap();
        let gen = recs.iter().map(|r| r.source().unwrap()).collect();
        (db, TrainTargets::new(recs.into_iter().map(|r| r.cloud).collect()), gen)
    }

    fn values(store: &crate::tensornet::ParamStore) -> Vec<Vec<f64>> {
        store.tensors().iter().map(|t| t.value.clone()).collect()
    }

    #[test]
    fn zero_pretrain_steps_leave_net_unchanged() {
        let (db, targets, _) = corpus(3, 4, 1.0, 1);
        let mut cfg = tiny_cfg();
        cfg.pretrain.steps = 0;
        let (mut net, _) = build_modules(&cfg, &db).unwrap();
        let before = values(&net.store);
        let report = pretrain(&mut net, &db, &targets, &cfg, &mut RunLog::disabled()).unwrap();
        assert!(report.history.is_empty());
        assert_eq!(values(&net.store), before);
    }

    #[test]
    fn pretraining_overfits_a_single_pair() {
        let (db, _, _) = corpus(1, 1, 1.0, 2);
        let recs = generate_targets(&db, 1, 1.0, 0.0, 0.1, 5).unwrap();
        let targets = TrainTargets::new(vec![recs[0].cloud.clone()]);
        let mut cfg = tiny_cfg();
        cfg.pretrain = PretrainConfig {
            steps: 2000,
            batch_size: 1,
            window: 100,
            tol: 0.0,
            lr: Some(0.02),
        };
        let (mut net, _) = build_modules(&cfg, &db).unwrap();
        let report = pretrain(&mut net, &db, &targets, &cfg, &mut RunLog::disabled()).unwrap();
        let best = report.history.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(best < 1e-4, "best loss {best:e}, first {:e}", report.history[0]);
    }

    #[test]
    fn pretraining_loss_falls_under_moving_average() {
        let (db, targets, _) = corpus(4, 12, 1.0, 3);
        let mut cfg = tiny_cfg();
        cfg.pretrain.steps = 400;
        cfg.pretrain.batch_size = 16;
        cfg.pretrain.tol = 0.0;
        let (mut net, _) = build_modules(&cfg, &db).unwrap();
        let h = pretrain(&mut net, &db, &targets, &cfg, &mut RunLog::disabled()).unwrap().history;
        let blocks: Vec<f64> = h.chunks(100).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        assert!(blocks.windows(2).all(|w| w[1] <= w[0]), "{blocks:?}");
    }

    #[test]
    fn alternating_steps_touch_only_their_module() {
        let (db, targets, _) = corpus(3, 4, 1.0, 4);
        let cfg = tiny_cfg();
        let (mut net, mut space) = build_modules(&cfg, &db).unwrap();
        let cache = refresh_cache(&mut space, &db, &targets.clouds, 0).unwrap();
        let work = prepare_batch(&net, &db, &targets, &cache, &[0, 1, 2, 3], 0, &cfg).unwrap();
        let (net_sum, space_sum) = (net.store.checksum(), space.store.checksum());
        let (_, weights) = retrieval_step(&mut space, &db, &targets, &work, &cfg).unwrap();
        assert_eq!(net.store.checksum(), net_sum);
        assert_ne!(space.store.checksum(), space_sum);
        let space_sum = space.store.checksum();
        deformation_step(&mut net, &work, &weights, &cfg).unwrap();
        assert_eq!(space.store.checksum(), space_sum);
        assert_ne!(net.store.checksum(), net_sum);
    }

    #[test]
    fn cache_matches_live_distances_and_tracks_updates() {
        let (db, targets, _) = corpus(3, 5, 1.0, 5);
        let cfg = tiny_cfg();
        let (net, mut space) = build_modules(&cfg, &db).unwrap();
        let cache = refresh_cache(&mut space, &db, &targets.clouds, 3).unwrap();
        assert_eq!(cache.d.shape(), &[3, 5]);
        assert_eq!(cache.stamp, 3);
        for s in 0..3 {
            for t in 0..5 {
                let live = space.distance(s, &targets.clouds[t]).unwrap();
                assert!((cache.d[[s, t]] - live).abs() <= 1e-12 * live.max(1.0));
                assert!(cache.d[[s, t]].is_finite() && cache.d[[s, t]] >= 0.0);
            }
        }
        assert!(!cache.needs_refresh(7, 5) && cache.needs_refresh(8, 5));
        let work = prepare_batch(&net, &db, &targets, &cache, &[0, 1, 2], 3, &cfg).unwrap();
        retrieval_step(&mut space, &db, &targets, &work, &cfg).unwrap();
        let after = refresh_cache(&mut space, &db, &targets.clouds, 4).unwrap();
        assert!(after.d.iter().zip(cache.d.iter()).any(|(a, b)| a != b));
    }

    fn joint_run(db: &[SourceShape], targets: &TrainTargets, cfg: &TrainConfig, dir: &std::path::Path) -> Vec<EpochMetrics> {
        let (mut net, mut space) = build_modules(cfg, db).unwrap();
        let mut state = JointState::default();
        joint_train(&mut space, &mut net, db, targets, cfg, &mut state, &mut RunLog::in_dir(dir).unwrap()).unwrap()
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let (db, targets, _) = corpus(3, 8, 1.0, 6);
        let cfg = tiny_cfg();
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        let ma = joint_run(&db, &targets, &cfg, &a);
        let mb = joint_run(&db, &targets, &cfg, &b);
        assert_eq!(ma, mb);
        for f in ["final.bin", "metrics.csv", "events.jsonl"] {
            assert_eq!(fs_read(&a.join(f)), fs_read(&b.join(f)), "{f}");
        }
        let other = TrainConfig { seed: 1, ..cfg };
        let mc = joint_run(&db, &targets, &other, &tmp.path().join("c"));
        assert_ne!(ma, mc);
    }

    fn fs_read(p: &std::path::Path) -> Vec<u8> {
        std::fs::read(p).unwrap()
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let (db, targets, _) = corpus(3, 8, 1.0, 7);
        let cfg = TrainConfig {
            epochs: 3,
            cache_refresh_epochs: 2,
            ..tiny_cfg()
        };
        let tmp = tempfile::tempdir().unwrap();
        let full = joint_run(&db, &targets, &cfg, &tmp.path().join("full"));

        let (mut net, mut space) = build_modules(&cfg, &db).unwrap();
        let mut state = JointState::default();
        let first = TrainConfig { epochs: 1, ..cfg.clone() };
        let mut log = RunLog::disabled();
        let mut m = joint_train(&mut space, &mut net, &db, &targets, &first, &mut state, &mut log).unwrap();
        let ck = tmp.path().join("mid.bin");
        save_checkpoint(&ck, &net, &space, &state).unwrap();

        // different init, fully overwritten by the checkpoint
        let fresh = TrainConfig { seed: 99, ..cfg.clone() };
        let (mut net2, mut space2) = build_modules(&fresh, &db).unwrap();
        let mut state2 = load_checkpoint(&ck, &mut net2, &mut space2).unwrap();
        assert_eq!(state2.epoch, 1);
        let dir = tmp.path().join("resumed");
        m.extend(joint_train(&mut space2, &mut net2, &db, &targets, &cfg, &mut state2, &mut RunLog::in_dir(&dir).unwrap()).unwrap());
        assert_eq!(m, full);
        assert_eq!(fs_read(&dir.join("final.bin")), fs_read(&tmp.path().join("full/final.bin")));
    }

    #[test]
    fn too_many_candidates_is_rejected() {
        let (db, targets, _) = corpus(2, 3, 1.0, 8);
        let cfg = TrainConfig { k: 3, ..tiny_cfg() };
        let (mut net, mut space) = build_modules(&tiny_cfg(), &db).unwrap();
        let r = joint_train(&mut space, &mut net, &db, &targets, &cfg, &mut JointState::default(), &mut RunLog::disabled());
        assert!(matches!(r, Err(Error::DatabaseTooSmall { requested: 3, available: 2 })));
    }

    #[test]
    fn biased_sampling_concentrates_on_generating_source() {
        let (db, targets, gen) = corpus(5, 20, 0.3, 9);
        let cfg = TrainConfig {
            epochs: 15,
            k: 3,
            sampling: SamplingMode::Biased,
            ..tiny_cfg()
        };
        let (mut net, mut space) = build_modules(&cfg, &db).unwrap();
        pretrain(&mut net, &db, &targets, &cfg, &mut RunLog::disabled()).unwrap();
        let mut state = JointState::default();
        joint_train(&mut space, &mut net, &db, &targets, &cfg, &mut state, &mut RunLog::disabled()).unwrap();
        let hits = (0..targets.len())
            .filter(|&t| {
                let d = space.all_distances(&space.encode_target(&targets.clouds[t]).unwrap()).unwrap();
                let p = soft_probabilities(&d, &vec![cfg.sigma0; d.len()]).unwrap();
                (0..p.len()).all(|s| s == gen[t] || p[s] < p[gen[t]])
            })
            .count();
        assert!(hits as f64 >= 0.8 * targets.len() as f64, "{hits} of {}", targets.len());
    }
}
