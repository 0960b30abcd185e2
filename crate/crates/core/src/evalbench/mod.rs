//! Retrieval-and-fit evaluation: top-k post-deformation chamfer, oracle
//! ranking, recall@N, and the baseline arms harness.

mod bench;

pub use bench::{
    evaluate_arm, load_arm, run_benchmark, train_arms, write_csv, Arm, ArmModels, BenchRow, BenchmarkConfig,
    ExperimentData,
};

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deformnet::{evaluate_offset, inner_deformation_optimization, DeformNet, IdoConfig};
use crate::error::{Error, Result};
use crate::geometry::{chamfer_points, PointCloud, SpatialIndex};
use crate::partmodel::SourceShape;
use crate::retrieval::RetrievalSpace;

/// Size of the oracle set that counts as a correct retrieval.
pub const ORACLE_TOP: usize = 5;
/// Number of retrieved sources whose chamfer is reported.
pub const TOP_K: usize = 5;

/// Source ids sorted by ascending score, ties broken by id.
pub fn rank_by(scores: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    ids
}

/// Post-deformation chamfer of every source deformed toward `target`.
pub fn deformed_chamfers(
    db: &[SourceShape],
    net: &DeformNet,
    target: &PointCloud,
    index: &SpatialIndex,
    use_projection: bool,
) -> Result<Vec<f64>> {
    let code = net.encode_target(target.points())?.output().to_vec();
    db.iter()
        .enumerate()
        .map(|(s, shape)| {
            let raw = net.forward_parts(s, shape, &code)?.offset;
            Ok(evaluate_offset(shape, s, 0, index, raw, net.alpha, use_projection)?.1.post_chamfer)
        })
        .collect()
}

/// Deforms every source toward the target and ranks by fitting error.
pub fn oracle_rank(
    db: &[SourceShape],
    net: &DeformNet,
    target: &PointCloud,
    index: &SpatialIndex,
    use_projection: bool,
) -> Result<Vec<usize>> {
    Ok(rank_by(&deformed_chamfers(db, net, target, index, use_projection)?))
}

/// Sources ranked by undeformed chamfer to the target.
pub fn static_ranking(db: &[SourceShape], index: &SpatialIndex) -> Vec<usize> {
    let d: Vec<f64> = db.iter().map(|s| chamfer_points(s.default_cloud().points(), index)).collect();
    rank_by(&d)
}

/// Sources ranked by learned retrieval distance.
pub fn retrieval_ranking(space: &RetrievalSpace, target: &PointCloud) -> Result<Vec<usize>> {
    Ok(rank_by(&space.all_distances(&space.encode_target(target)?)?))
}

/// Whether any of the top-`n` retrieved sources lies in the oracle top five.
pub fn recall_at_n(retrieved: &[usize], oracle: &[usize], n: usize) -> Result<bool> {
    if n == 0 || n > retrieved.len() {
        return Err(Error::DatabaseTooSmall {
            requested: n,
            available: retrieved.len(),
        });
    }
    let top = &oracle[..ORACLE_TOP.min(oracle.len())];
    Ok(retrieved[..n].iter().any(|r| top.contains(r)))
}

/// 1-based position of `retrieved_top1` in the oracle ranking.
pub fn ranking_eval(retrieved_top1: usize, oracle: &[usize]) -> Result<usize> {
    oracle
        .iter()
        .position(|&s| s == retrieved_top1)
        .map(|p| p + 1)
        .ok_or(Error::UnknownSource(retrieved_top1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEval {
    pub target: usize,
    /// Retrieved source ids, best first.
    pub retrieved: Vec<usize>,
    /// Chamfer of the k-th retrieved source after deformation (and direct
    /// optimization when enabled), k = 1..=5.
    pub topk_chamfer: Vec<f64>,
    /// Network-only post-deformation chamfer of every source.
    pub source_chamfer: Vec<f64>,
    pub oracle: Vec<usize>,
    pub oracle_rank: usize,
    pub recall1: bool,
    pub recall5: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub topk_chamfer: Vec<f64>,
    pub mean_rank: f64,
    pub recall1: f64,
    pub recall5: f64,
    pub targets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_target: Vec<TargetEval>,
    pub summary: EvalSummary,
}

/// Test targets with their indices and ids relative to the full target set.
#[derive(Debug, Clone)]
pub struct EvalTargets {
    pub ids: Vec<usize>,
    pub clouds: Vec<PointCloud>,
    pub index: Vec<SpatialIndex>,
}

impl EvalTargets {
    pub fn new(ids: Vec<usize>, clouds: Vec<PointCloud>) -> Self {
        let index = clouds.par_iter().map(SpatialIndex::build).collect();
        Self { ids, clouds, index }
    }
}

/// How retrieved lists are produced for an evaluation.
pub enum Ranker<'a> {
    Static,
    Learned(&'a RetrievalSpace),
}

/// Evaluates one retrieval/deformation pairing over `targets`. With `refine`
/// set, each of the top-k retrieved sources is additionally optimized
/// directly from the network's prediction and the better of the two fits is
/// kept.
pub fn evaluate(
    db: &[SourceShape],
    net: &DeformNet,
    ranker: &Ranker<'_>,
    targets: &EvalTargets,
    use_projection: bool,
    refine: Option<&IdoConfig>,
) -> Result<EvalResult> {
    if db.is_empty() || targets.clouds.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    let k = TOP_K.min(db.len());
    let per_target = (0..targets.clouds.len())
        .into_par_iter()
        .map(|i| {
            let cloud = &targets.clouds[i];
            let index = &targets.index[i];
            let retrieved = match ranker {
                Ranker::Static => static_ranking(db, index),
                Ranker::Learned(space) => retrieval_ranking(space, cloud)?,
            };
            let source_chamfer = deformed_chamfers(db, net, cloud, index, use_projection)?;
            let oracle = rank_by(&source_chamfer);
            let mut topk_chamfer: Vec<f64> = retrieved[..k].iter().map(|&s| source_chamfer[s]).collect();
            if let Some(cfg) = refine {
                let code = net.encode_target(cloud.points())?.output().to_vec();
                for (slot, &s) in topk_chamfer.iter_mut().zip(&retrieved[..k]) {
                    let init = net.forward_parts(s, &db[s], &code)?.offset;
                    let run = inner_deformation_optimization(&db[s], index, &init, net.alpha, cfg)?;
                    let (_, rep) = evaluate_offset(&db[s], s, i, index, run.offset, net.alpha, use_projection)?;
                    if rep.post_chamfer < *slot {
                        *slot = rep.post_chamfer;
                    }
                }
            }
            Ok(TargetEval {
                target: targets.ids[i],
                oracle_rank: ranking_eval(retrieved[0], &oracle)?,
                recall1: recall_at_n(&retrieved, &oracle, 1)?,
                recall5: recall_at_n(&retrieved, &oracle, k)?,
                retrieved,
                topk_chamfer,
                source_chamfer,
                oracle,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_target.len() as f64;
    let summary = EvalSummary {
        topk_chamfer: (0..k).map(|j| per_target.iter().map(|t| t.topk_chamfer[j]).sum::<f64>() / n).collect(),
        mean_rank: per_target.iter().map(|t| t.oracle_rank as f64).sum::<f64>() / n,
        recall1: per_target.iter().filter(|t| t.recall1).count() as f64 / n,
        recall5: per_target.iter().filter(|t| t.recall5).count() as f64 / n,
        targets: per_target.len(),
    };
    Ok(EvalResult { per_target, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_database, generate_targets, GenSpec};
    use crate::deformnet::DeformConfig;
    use crate::geometry::chamfer;
    use crate::partmodel::{DeformationParams, apply_deformation};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn db(n: usize, seed: u64) -> Vec<SourceShape> {
        let spec = GenSpec {
            points_per_shape: 96,
            seed,
            ..GenSpec::default()
        };
        generate_database(&spec, n).unwrap()
    }

    fn net(db: &[SourceShape], zero: bool, seed: u64) -> DeformNet {
        let cfg = DeformConfig {
            point_widths: vec![16],
            target_code_dim: 8,
            global_code_dim: 4,
            part_code_dim: 4,
            hidden: vec![16],
            zero_init_output: zero,
            ..DeformConfig::default()
        };
        DeformNet::new(&cfg, db, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn oracle_matches_brute_force() {
        let db = db(5, 1);
        let net = net(&db, false, 2);
        for t in generate_targets(&db, 4, 1.0, 0.0, 0.1, 3).unwrap() {
            let index = SpatialIndex::build(&t.cloud);
            let mut brute: Vec<(f64, usize)> = (0..db.len())
                .map(|s| {
                    let raw = net.predict_offset(s, &db[s], &t.cloud).unwrap();
                    let p = DeformationParams(db[s].constraint.project(&raw.0));
                    (chamfer(&apply_deformation(&db[s], &p, 0.1).unwrap(), &t.cloud), s)
                })
                .collect();
            brute.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = brute.iter().map(|b| b.1).collect();
            assert_eq!(oracle_rank(&db, &net, &t.cloud, &index, true).unwrap(), want);
        }
    }

    #[test]
    fn oracle_trivial_cases() {
        let db = db(4, 4);
        let net0 = net(&db, true, 0);
        for j in 0..db.len() {
            let cloud = db[j].default_cloud();
            let o = oracle_rank(&db, &net0, cloud, &SpatialIndex::build(cloud), true).unwrap();
            assert_eq!(o[0], j);
        }
        let one = &db[..1];
        let n1 = net(one, false, 1);
        let cloud = db[2].default_cloud();
        assert_eq!(oracle_rank(one, &n1, cloud, &SpatialIndex::build(cloud), true).unwrap(), vec![0]);
    }

    #[test]
    fn oracle_is_invariant_to_storage_order() {
        let base = db(6, 5);
        let mut perm: Vec<usize> = (0..base.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(8));
        let permuted: Vec<SourceShape> = perm.iter().map(|&i| base[i].clone()).collect();
        let (na, nb) = (net(&base, true, 0), net(&permuted, true, 0));
        for t in generate_targets(&base, 5, 1.0, 0.01, 0.1, 6).unwrap() {
            let index = SpatialIndex::build(&t.cloud);
            let a = oracle_rank(&base, &na, &t.cloud, &index, true).unwrap();
            let b: Vec<usize> = oracle_rank(&permuted, &nb, &t.cloud, &index, true)
                .unwrap()
                .into_iter()
                .map(|i| perm[i])
                .collect();
            assert_eq!(a, b);
            assert_eq!(a, oracle_rank(&base, &na, &t.cloud, &index, true).unwrap());
        }
    }

    #[test]
    fn ties_break_by_id() {
        assert_eq!(rank_by(&[1.0, 0.5, 1.0, 0.5]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn recall_examples() {
        let oracle: Vec<usize> = (0..10).collect();
        assert!(recall_at_n(&[0, 9, 8], &oracle, 1).unwrap());
        assert!(!recall_at_n(&[5, 6, 7, 8, 9, 0], &oracle, 5).unwrap());
        assert!(recall_at_n(&[9, 8, 7, 6, 5, 4, 3, 2, 1, 0], &oracle, 10).unwrap());
        assert!(matches!(recall_at_n(&[0, 1], &oracle, 3), Err(Error::DatabaseTooSmall { .. })));
        assert!(recall_at_n(&[0, 1], &oracle, 0).is_err());
    }

    #[test]
    fn recall_is_monotone_in_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mut retrieved: Vec<usize> = (0..12).collect();
            let mut oracle = retrieved.clone();
            retrieved.shuffle(&mut rng);
            oracle.shuffle(&mut rng);
            let r: Vec<bool> = (1..=12).map(|n| recall_at_n(&retrieved, &oracle, n).unwrap()).collect();
            assert!(r.windows(2).all(|w| w[1] >= w[0]));
            assert!(r[11]);
        }
    }

    #[test]
    fn ranking_examples() {
        let oracle: Vec<usize> = (0..20).collect();
        assert_eq!(ranking_eval(0, &oracle).unwrap(), 1);
        assert_eq!(ranking_eval(19, &oracle).unwrap(), 20);
        assert!(matches!(ranking_eval(20, &oracle), Err(Error::UnknownSource(20))));
    }

    #[test]
    fn random_retrieval_has_middle_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trials = 20_000;
        let mut oracle: Vec<usize> = (0..20).collect();
        let total: usize = (0..trials)
            .map(|_| {
                oracle.shuffle(&mut rng);
                ranking_eval(rand::Rng::gen_range(&mut rng, 0..20), &oracle).unwrap()
            })
            .sum();
        let mean = total as f64 / trials as f64;
        assert!((mean - 10.5).abs() < 0.05 * 10.5, "{mean}");
    }

    #[test]
    fn refinement_never_worsens_and_reruns_match() {
        let db = db(4, 7);
        let net = net(&db, false, 3);
        let recs = generate_targets(&db, 6, 1.0, 0.0, 0.1, 8).unwrap();
        let targets = EvalTargets::new((0..6).collect(), recs.into_iter().map(|r| r.cloud).collect());
        let plain = evaluate(&db, &net, &Ranker::Static, &targets, true, None).unwrap();
        assert_eq!(plain, evaluate(&db, &net, &Ranker::Static, &targets, true, None).unwrap());
        let cfg = IdoConfig {
            max_iters: 50,
            ..IdoConfig::default()
        };
        let refined = evaluate(&db, &net, &Ranker::Static, &targets, true, Some(&cfg)).unwrap();
        for (p, r) in plain.per_target.iter().zip(&refined.per_target) {
            assert_eq!(p.retrieved, r.retrieved);
            for (a, b) in p.topk_chamfer.iter().zip(&r.topk_chamfer) {
                assert!(b <= a);
            }
        }
        assert!(refined.summary.topk_chamfer[0] < plain.summary.topk_chamfer[0]);
        let s = &plain.summary;
        assert!((0.0..=1.0).contains(&s.recall1) && s.recall1 <= s.recall5);
        assert!(s.mean_rank >= 1.0 && s.mean_rank <= db.len() as f64);
    }
}
