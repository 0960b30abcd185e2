//! Fit and symmetry losses of a deformed source and their gradients with
//! respect to the deformation parameters.

use super::{DeformationParams, SourceShape, PARAMS_PER_PART};
use crate::error::Result;
use crate::geometry::{mirror, sub, ChamferMatch, PointCloud, SpatialIndex, Vec3, MIN_EXTENT};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Evaluate at `P · offset` and return `P`-projected gradients.
    pub use_projection: bool,
    /// Weight of the yz-mirror symmetry term; 0 skips it entirely.
    pub symmetry_weight: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            use_projection: true,
            symmetry_weight: 1.0,
        }
    }
}

/// Loss terms at one parameter setting and the gradient of
/// `chamfer + symmetry_weight · symmetry`.
#[derive(Debug, Clone)]
pub struct FitEval {
    pub chamfer: f64,
    /// `None` when the symmetry weight was 0.
    pub symmetry: Option<f64>,
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `chamfer(O, reflect_yz(O))`.
///
/// The mirror of the nearest neighbour of a reflected point is the nearest
/// neighbour in the reflected set, so both directions of the chamfer are
/// equal and a single index over `O` answers them.
pub fn symmetry_loss(deformed: &PointCloud) -> f64 {
    let index = SpatialIndex::build(deformed);
    symmetry_terms(&index).1
}

/// Per point `i`, the partner `j` whose mirror is nearest to `o_i`, and the
/// symmetry loss.
fn symmetry_terms(index: &SpatialIndex) -> (Vec<usize>, f64) {
    let pts = index.points();
    let mut partner = Vec::with_capacity(pts.len());
    let mut sum = 0.0;
    for p in pts {
        let (j, d2) = index.nearest(&mirror(p));
        partner.push(j);
        sum += d2;
    }
    (partner, 2.0 * sum / pts.len() as f64)
}

/// Loss and gradient with respect to absolute box parameters `params`.
pub fn param_gradient(
    shape: &SourceShape,
    params: &DeformationParams,
    target: &SpatialIndex,
    symmetry_weight: f64,
) -> FitEval {
    let deformed = shape.deform_absolute(params);
    let index = SpatialIndex::from_points(deformed);
    let pts = index.points();
    let matched = ChamferMatch::compute(&index, target);
    let chamfer = matched.value();
    let mut point_grad = matched.grad_a(pts, target.points());

    let mut symmetry = None;
    if symmetry_weight != 0.0 {
        let (partner, value) = symmetry_terms(&index);
        let w = symmetry_weight * 4.0 / pts.len() as f64;
        for (i, &j) in partner.iter().enumerate() {
            let r = sub(&pts[i], &mirror(&pts[j]));
            let mr = mirror(&r);
            for k in 0..3 {
                point_grad[i][k] += w * r[k];
                point_grad[j][k] -= w * mr[k];
            }
        }
        symmetry = Some(value);
    }

    let grad = chain_to_params(shape, params, &point_grad);
    FitEval {
        chamfer,
        symmetry,
        loss: chamfer + symmetry_weight * symmetry.unwrap_or(0.0),
        grad,
    }
}

fn chain_to_params(shape: &SourceShape, params: &DeformationParams, point_grad: &[Vec3]) -> Vec<f64> {
    let mut grad = vec![0.0; shape.param_count()];
    for ((g, &k), w) in point_grad
        .iter()
        .zip(shape.point_part())
        .zip(shape.box_coords())
    {
        let base = k as usize * PARAMS_PER_PART;
        for a in 0..3 {
            grad[base + a] += g[a];
            grad[base + 3 + a] += g[a] * w[a];
        }
    }
    // clamped extents do not move the samples
    for (k, p) in params.0.chunks_exact(PARAMS_PER_PART).enumerate() {
        for a in 0..3 {
            if p[3 + a] < MIN_EXTENT {
                grad[k * PARAMS_PER_PART + 3 + a] = 0.0;
            }
        }
    }
    grad
}

/// Loss of `apply_deformation(shape, offset', alpha)` against `target`,
/// where `offset' = P · offset` when projection is on, and its gradient with
/// respect to `offset`.
pub fn fit_gradient(
    shape: &SourceShape,
    offset: &DeformationParams,
    alpha: f64,
    target: &SpatialIndex,
    opts: FitOptions,
) -> Result<FitEval> {
    shape.check_offset(offset)?;
    let effective = if opts.use_projection {
        DeformationParams(shape.constraint.project(&offset.0))
    } else {
        offset.clone()
    };
    let params = shape.default_params.offset_by(&effective, alpha);
    let mut eval = param_gradient(shape, &params, target, opts.symmetry_weight);
    for g in &mut eval.grad {
        *g *= alpha;
    }
    if opts.use_projection {
        eval.grad = shape.constraint.project(&eval.grad);
    }
    Ok(eval)
}
