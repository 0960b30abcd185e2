//! Per-pair direct optimization of the deformation parameters and the
//! distillation loss that pulls network predictions toward its result.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SpatialIndex;
use crate::partmodel::{fit_gradient, DeformationParams, FitOptions, SourceShape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdoConfig {
    /// Step size on the absolute box parameters.
    pub lr: f64,
    pub momentum: f64,
    pub max_iters: usize,
    /// Stop once the best loss improved by less than `tol` over the last
    /// `patience` iterations.
    pub tol: f64,
    pub patience: usize,
    /// Abort when the loss exceeds this value.
    pub divergence: f64,
    pub symmetry_weight: f64,
    pub use_projection: bool,
}

impl Default for IdoConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            max_iters: 2000,
            tol: 1e-6,
            patience: 50,
            divergence: 1e3,
            symmetry_weight: 0.0,
            use_projection: true,
        }
    }
}

impl IdoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.tol >= 0.0) || self.patience == 0 {
            return Err(Error::InvalidConfig(
                "ido needs lr > 0, momentum in [0, 1), tol >= 0, patience >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdoResult {
    /// Best iterate (feasible when projection is on).
    pub offset: DeformationParams,
    pub initial_loss: f64,
    pub best_loss: f64,
    /// Chamfer term at the best iterate.
    pub chamfer: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Loss of every evaluated iterate, in order.
    pub trace: Vec<f64>,
}

/// Gradient descent on the deformation of `shape` toward `target`, starting
/// from `init` (projected first when projection is on). Steps are taken on
/// the absolute parameters `p̄ + α·offset`, so `lr` does not depend on `α`.
pub fn inner_deformation_optimization(
    shape: &SourceShape,
    target: &SpatialIndex,
    init: &DeformationParams,
    alpha: f64,
    cfg: &IdoConfig,
) -> Result<IdoResult> {
    cfg.validate()?;
    shape.check_offset(init)?;
    let opts = FitOptions {
        use_projection: cfg.use_projection,
        symmetry_weight: cfg.symmetry_weight,
    };
    let mut x = if cfg.use_projection {
        DeformationParams(shape.constraint.project(&init.0))
    } else {
        init.clone()
    };
    let step = cfg.lr / (alpha * alpha);
    let mut velocity = vec![0.0; x.len()];
    let mut trace = Vec::new();
    let mut best: Option<(f64, f64, DeformationParams)> = None;
    let mut converged = false;
    let mut iterations = 0;
    // best loss after each iteration, for the windowed stopping rule
    let mut best_history: Vec<f64> = Vec::new();
    loop {
        let eval = fit_gradient(shape, &x, alpha, target, opts)?;
        if !eval.loss.is_finite() || eval.loss > cfg.divergence {
            return Err(Error::Numerical(format!(
                "direct optimization diverged at iteration {iterations}: loss {} (start {})",
                eval.loss,
                trace.first().copied().unwrap_or(eval.loss)
            )));
        }
        trace.push(eval.loss);
        if best.as_ref().map_or(true, |b| eval.loss < b.0) {
            best = Some((eval.loss, eval.chamfer, x.clone()));
        }
        let best_now = best.as_ref().unwrap().0;
        best_history.push(best_now);
        let stationary = eval.grad.iter().all(|g| g.abs() < 1e-14);
        if stationary
            || best_history.len() > cfg.patience
            && best_history[best_history.len() - 1 - cfg.patience] - best_now < cfg.tol
        {
            converged = true;
            break;
        }
        if iterations == cfg.max_iters {
            break;
        }
        for ((xi, vi), gi) in x.0.iter_mut().zip(&mut velocity).zip(&eval.grad) {
            *vi = cfg.momentum * *vi + gi;
            *xi -= step * *vi;
        }
        iterations += 1;
    }
    let (best_loss, chamfer, offset) = best.expect("at least one evaluation");
    Ok(IdoResult {
        offset,
        initial_loss: trace[0],
        best_loss,
        chamfer,
        iterations,
        converged,
        trace,
    })
}

/// Mean squared difference between predicted and optimized offsets, and its
/// gradient with respect to the prediction.
pub fn ido_distillation_loss(
    predicted: &DeformationParams,
    optimized: &DeformationParams,
) -> Result<(f64, Vec<f64>)> {
    if predicted.len() != optimized.len() {
        return Err(Error::DimensionMismatch {
            expected: optimized.len(),
            got: predicted.len(),
        });
    }
    if predicted.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = predicted.len() as f64;
    let diff: Vec<f64> = predicted.0.iter().zip(&optimized.0).map(|(p, q)| p - q).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.into_iter().map(|d| 2.0 * d / n).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partmodel::apply_deformation;
    use crate::partmodel::test_shapes::three_part_shape;
    use crate::testutil::max_rel_err;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn distillation_examples() {
        let z = DeformationParams(vec![0.0, 0.0]);
        let o = DeformationParams(vec![1.0, 1.0]);
        assert_eq!(ido_distillation_loss(&o, &o).unwrap().0, 0.0);
        let (l, g) = ido_distillation_loss(&z, &o).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g, vec![-1.0, -1.0]);
        assert!(ido_distillation_loss(&z, &DeformationParams(vec![1.0])).is_err());
    }

    #[test]
    fn distillation_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q = DeformationParams((0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let (_, g) = ido_distillation_loss(&DeformationParams(p.clone()), &q).unwrap();
        let h = 1e-5;
        let fd: Vec<f64> = (0..12)
            .map(|i| {
                let mut a = p.clone();
                let mut b = p.clone();
                a[i] += h;
                b[i] -= h;
                let la = ido_distillation_loss(&DeformationParams(a), &q).unwrap().0;
                let lb = ido_distillation_loss(&DeformationParams(b), &q).unwrap().0;
                (la - lb) / (2.0 * h)
            })
            .collect();
        assert!(max_rel_err(&g, &fd) < 1e-4);
    }

    #[test]
    fn recovers_planted_offset() {
        let s = three_part_shape(3, 80);
        let planted = DeformationParams(s.constraint.project(&[0.4, -0.3, 0.2, 0.5, -0.2, 0.3, 0.1, 0.2, -0.1, 0.3, 0.4, -0.2, 0.1, 0.2, -0.1, 0.3, 0.4, -0.2]));
        let target = SpatialIndex::build(&apply_deformation(&s, &planted, 0.1).unwrap());
        let cfg = IdoConfig::default();
        let r = inner_deformation_optimization(&s, &target, &DeformationParams::zeros(3), 0.1, &cfg).unwrap();
        assert!(r.chamfer < 1e-5, "chamfer {} after {} iterations", r.chamfer, r.iterations);
        assert!(r.best_loss <= r.initial_loss);
        assert!(s.constraint.residual(&r.offset.0).iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn optimal_init_stops_immediately() {
        let s = three_part_shape(4, 40);
        let target = SpatialIndex::build(s.default_cloud());
        let init = DeformationParams::zeros(3);
        let r = inner_deformation_optimization(&s, &target, &init, 0.1, &IdoConfig::default()).unwrap();
        assert!(r.iterations <= 3);
        assert!(r.offset.max_abs() < 1e-6);
        assert_eq!(r.chamfer, 0.0);
    }

    #[test]
    fn divergence_is_reported() {
        let s = three_part_shape(4, 40);
        let far: Vec<_> = s.default_cloud().points().iter().map(|p| [p[0] + 100.0, p[1], p[2]]).collect();
        let target = SpatialIndex::from_points(far);
        let err = inner_deformation_optimization(&s, &target, &DeformationParams::zeros(3), 0.1, &IdoConfig::default());
        assert!(matches!(err, Err(Error::Numerical(_))));
    }
}
