//! Part-segmented source shapes and their box-handle deformation space.
//!
//! Every part owns an axis-aligned box with 6 parameters (center, full
//! extents). A point sampled inside part `k` moves with its box through its
//! normalized box coordinates, so a change of box parameters from
//! `(c̄, d̄)` to `(c, d)` sends `x` to `c + (x − c̄) ⊙ (d ⊘ d̄)`.

mod constraints;
mod fit;

pub use constraints::{extract_contacts, Contact, ConstraintSystem, DEFAULT_TAU};
pub use fit::{fit_gradient, param_gradient, symmetry_loss, FitEval, FitOptions};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, PointCloud, TriangleMesh, Vec3, MIN_EXTENT};

pub const PARAMS_PER_PART: usize = 6;

/// One box-handle part of a source shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Part {
    pub id: usize,
    pub bbox: Aabb,
    pub points: PointCloud,
    pub mesh: Option<TriangleMesh>,
}

impl Part {
    pub fn new(id: usize, bbox: Aabb, points: PointCloud) -> Result<Self> {
        if let Some(index) = points.points().iter().position(|p| !bbox.contains(p, 1e-6)) {
            return Err(Error::InvalidConfig(format!(
                "part {id}: sample {index} lies outside its box"
            )));
        }
        Ok(Self {
            id,
            bbox,
            points,
            mesh: None,
        })
    }
}

/// Flat deformation parameter vector, 6 entries per part:
/// `[cx, cy, cz, sx, sy, sz]` for part 0, then part 1, and so on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeformationParams(pub Vec<f64>);

impl DeformationParams {
    pub fn zeros(parts: usize) -> Self {
        Self(vec![0.0; parts * PARAMS_PER_PART])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn part_count(&self) -> usize {
        self.0.len() / PARAMS_PER_PART
    }

    pub fn part(&self, k: usize) -> &[f64] {
        &self.0[k * PARAMS_PER_PART..(k + 1) * PARAMS_PER_PART]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `self + alpha · other`, entry-wise.
    pub fn offset_by(&self, other: &DeformationParams, alpha: f64) -> DeformationParams {
        DeformationParams(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + alpha * b)
                .collect(),
        )
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// A database source: parts, their default box parameters, and the
/// precomputed connectivity constraints.
#[derive(Debug, Clone)]
pub struct SourceShape {
    pub name: String,
    pub parts: Vec<Part>,
    pub default_params: DeformationParams,
    pub constraint: ConstraintSystem,
    default_cloud: PointCloud,
    point_part: Vec<u32>,
    /// Per point, the normalized coordinate `(x − c̄) ⊘ d̄` inside its part.
    box_coords: Vec<Vec3>,
}

impl SourceShape {
    /// Builds a shape and extracts its contacts with threshold `tau`.
    pub fn new(name: impl Into<String>, parts: Vec<Part>, tau: f64) -> Result<Self> {
        let constraint = extract_contacts(&parts, tau);
        Self::with_constraint(name, parts, constraint)
    }

    /// Builds a shape from explicitly listed contacts.
    pub fn with_contacts(
        name: impl Into<String>,
        parts: Vec<Part>,
        contacts: Vec<Contact>,
    ) -> Result<Self> {
        for c in &contacts {
            if c.parts.0 >= parts.len() || c.parts.1 >= parts.len() || c.parts.0 == c.parts.1 {
                return Err(Error::InvalidConfig(format!(
                    "contact references invalid parts {:?}",
                    c.parts
                )));
            }
        }
        let constraint = ConstraintSystem::from_contacts(&parts, contacts);
        Self::with_constraint(name, parts, constraint)
    }

    fn with_constraint(
        name: impl Into<String>,
        parts: Vec<Part>,
        constraint: ConstraintSystem,
    ) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidConfig("shape has no parts".into()));
        }
        for (k, p) in parts.iter().enumerate() {
            if p.id != k {
                return Err(Error::InvalidConfig(format!(
                    "part ids must be 0..n in order; found {} at {k}",
                    p.id
                )));
            }
        }
        let mut default_params = Vec::with_capacity(parts.len() * PARAMS_PER_PART);
        let mut points = Vec::new();
        let mut point_part = Vec::new();
        let mut box_coords = Vec::new();
        for (k, p) in parts.iter().enumerate() {
            default_params.extend_from_slice(&p.bbox.center);
            default_params.extend_from_slice(&p.bbox.dims);
            for x in p.points.points() {
                points.push(*x);
                point_part.push(k as u32);
                box_coords.push([0, 1, 2].map(|a| (x[a] - p.bbox.center[a]) / p.bbox.dims[a]));
            }
        }
        Ok(Self {
            name: name.into(),
            parts,
            default_params: DeformationParams(default_params),
            constraint,
            default_cloud: PointCloud::new(points)?,
            point_part,
            box_coords,
        })
    }

    pub fn part_count(&self) -> usize {
        self.parts.len()
    }

    pub fn param_count(&self) -> usize {
        self.parts.len() * PARAMS_PER_PART
    }

    /// Concatenated default samples of all parts, in part order.
    pub fn default_cloud(&self) -> &PointCloud {
        &self.default_cloud
    }

    pub fn point_part(&self) -> &[u32] {
        &self.point_part
    }

    pub(crate) fn box_coords(&self) -> &[Vec3] {
        &self.box_coords
    }

    pub fn check_offset(&self, offset: &DeformationParams) -> Result<()> {
        if offset.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: offset.len(),
            });
        }
        if let Some(i) = offset.0.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("offset entry {i} is not finite")));
        }
        Ok(())
    }

    /// Absolute parameters `p̄ + alpha · offset`.
    pub fn absolute_params(&self, offset: &DeformationParams, alpha: f64) -> Result<DeformationParams> {
        self.check_offset(offset)?;
        Ok(self.default_params.offset_by(offset, alpha))
    }

    /// Deformed boxes for absolute parameters (extents clamped).
    pub fn boxes_for(&self, params: &DeformationParams) -> Vec<Aabb> {
        (0..self.part_count())
            .map(|k| {
                let p = params.part(k);
                Aabb::new([p[0], p[1], p[2]], [p[3], p[4], p[5]])
            })
            .collect()
    }

    /// Deformed samples for absolute parameters.
    pub fn deform_absolute(&self, params: &DeformationParams) -> Vec<Vec3> {
        let defaults = &self.default_params;
        let per_part: Vec<([f64; 3], [f64; 3])> = (0..self.part_count())
            .map(|k| {
                let p = params.part(k);
                let q = defaults.part(k);
                let shift = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                let ratio = [0, 1, 2].map(|a| p[3 + a].max(MIN_EXTENT) / q[3 + a] - 1.0);
                (shift, ratio)
            })
            .collect();
        let mut out = Vec::with_capacity(self.point_part.len());
        for (x, &k) in self.default_cloud.points().iter().zip(&self.point_part) {
            let (shift, ratio) = &per_part[k as usize];
            let c = &defaults.part(k as usize)[..3];
            // x + (c − c̄) + (x − c̄)(d/d̄ − 1) keeps the identity map exact
            out.push([0, 1, 2].map(|a| x[a] + shift[a] + (x[a] - c[a]) * ratio[a]));
        }
        out
    }

    /// Deformed part meshes (cuboids) for absolute parameters.
    pub fn deformed_mesh(&self, params: &DeformationParams) -> TriangleMesh {
        let meshes: Vec<TriangleMesh> = self.boxes_for(params).iter().map(|b| b.to_mesh()).collect();
        TriangleMesh::merge(&meshes)
    }
}

/// Deforms `shape` by `p̄ + alpha · offset` and returns the concatenated
/// samples of all parts.
pub fn apply_deformation(
    shape: &SourceShape,
    offset: &DeformationParams,
    alpha: f64,
) -> Result<PointCloud> {
    let params = shape.absolute_params(offset, alpha)?;
    PointCloud::new(shape.deform_absolute(&params))
}

/// Nearest contact-preserving offset, `Q Qᵀ · offset`.
pub fn project_offset(cs: &ConstraintSystem, offset: &DeformationParams) -> Result<DeformationParams> {
    if offset.len() != cs.dim() {
        return Err(Error::DimensionMismatch {
            expected: cs.dim(),
            got: offset.len(),
        });
    }
    Ok(DeformationParams(cs.project(&offset.0)))
}

/// Largest distance between the two images of any contact point, one moved
/// with each of its parts, under `p̄ + alpha · offset`.
pub fn contact_discrepancy(shape: &SourceShape, offset: &DeformationParams, alpha: f64) -> Result<f64> {
    let params = shape.absolute_params(offset, alpha)?;
    let image = |k: usize, x: &Vec3| -> Vec3 {
        let p = params.part(k);
        let q = shape.default_params.part(k);
        [0, 1, 2].map(|a| p[a] + (x[a] - q[a]) * (p[3 + a].max(MIN_EXTENT) / q[3 + a]))
    };
    Ok(shape
        .constraint
        .contacts
        .iter()
        .map(|c| crate::geometry::dist2(&image(c.parts.0, &c.point), &image(c.parts.1, &c.point)).sqrt())
        .fold(0.0, f64::max))
}


#[cfg(test)]
mod tests {
    use super::test_shapes::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_offset_is_exact_identity() {
        let s = three_part_shape(1, 40);
        let out = apply_deformation(&s, &DeformationParams::zeros(3), 0.1).unwrap();
        assert_eq!(out.points(), s.default_cloud().points());
    }

    #[test]
    fn single_box_affine_map() {
        let bbox = Aabb::new([0.0; 3], [1.0; 3]);
        let part = Part::new(0, bbox, PointCloud::new(vec![[0.5, 0.0, 0.0]]).unwrap()).unwrap();
        let s = SourceShape::new("one", vec![part], DEFAULT_TAU).unwrap();
        // actual c = (1,0,0), d = (2,1,1) with alpha = 1
        let off = DeformationParams(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let out = apply_deformation(&s, &off, 1.0).unwrap();
        assert_eq!(out.points()[0], [2.0, 0.0, 0.0]);
    }

    #[test]
    fn matches_scalar_reimplementation() {
        let s = three_part_shape(2, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let off = DeformationParams((0..18).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let out = apply_deformation(&s, &off, 0.1).unwrap();
            let mut i = 0;
            for (k, part) in s.parts.iter().enumerate() {
                let cb = part.bbox.center;
                let db = part.bbox.dims;
                let c: Vec<f64> = (0..3).map(|a| cb[a] + 0.1 * off.0[6 * k + a]).collect();
                let d: Vec<f64> = (0..3).map(|a| db[a] + 0.1 * off.0[6 * k + 3 + a]).collect();
                for x in part.points.points() {
                    for a in 0..3 {
                        let expect = c[a] + (x[a] - cb[a]) * (d[a] / db[a]);
                        assert!((out.points()[i][a] - expect).abs() < 1e-12);
                    }
                    i += 1;
                }
            }
        }
    }

    #[test]
    fn affine_in_parameters() {
        let s = three_part_shape(3, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = DeformationParams((0..18).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b = DeformationParams((0..18).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mid = DeformationParams(a.0.iter().zip(&b.0).map(|(x, y)| 0.5 * (x + y)).collect());
        let oa = apply_deformation(&s, &a, 0.1).unwrap();
        let ob = apply_deformation(&s, &b, 0.1).unwrap();
        let om = apply_deformation(&s, &mid, 0.1).unwrap();
        for ((p, q), m) in oa.points().iter().zip(ob.points()).zip(om.points()) {
            for k in 0..3 {
                assert!((0.5 * (p[k] + q[k]) - m[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_length_offset_is_rejected() {
        let s = three_part_shape(5, 10);
        assert!(matches!(
            apply_deformation(&s, &DeformationParams::zeros(2), 0.1),
            Err(Error::DimensionMismatch { expected: 18, got: 12 })
        ));
    }

    #[test]
    fn samples_outside_box_are_rejected() {
        let bbox = Aabb::new([0.0; 3], [1.0; 3]);
        let pts = PointCloud::new(vec![[0.6, 0.0, 0.0]]).unwrap();
        assert!(Part::new(0, bbox, pts).is_err());
    }

    #[test]
    fn projection_is_the_constrained_least_squares_solution() {
        // min |x - v|² s.t. Bx = 0, solved through its KKT system
        let s = three_part_shape(3, 20);
        let cs = &s.constraint;
        let (m, n) = (cs.b.nrows(), cs.b.ncols());
        let mut kkt = nalgebra::DMatrix::zeros(n + m, n + m);
        kkt.view_mut((0, 0), (n, n)).fill_with_identity();
        kkt.view_mut((0, n), (n, m)).copy_from(&cs.b.transpose());
        kkt.view_mut((n, 0), (m, n)).copy_from(&cs.b);
        let pinv = kkt.pseudo_inverse(1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut rhs = nalgebra::DVector::zeros(n + m);
            rhs.rows_mut(0, n).copy_from_slice(&v);
            let x = &pinv * rhs;
            let out = project_offset(cs, &DeformationParams(v)).unwrap();
            for (a, b) in out.0.iter().zip(x.iter()) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
            assert!(cs.residual(&out.0).iter().all(|r| r.abs() < 1e-8));
        }
    }

    #[test]
    fn projection_fixes_feasible_offsets() {
        let s = three_part_shape(4, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let feasible = project_offset(&s.constraint, &DeformationParams(v)).unwrap();
        let again = project_offset(&s.constraint, &feasible).unwrap();
        assert!(feasible.0.iter().zip(&again.0).all(|(a, b)| (a - b).abs() < 1e-10));
        let zero = project_offset(&s.constraint, &DeformationParams::zeros(3)).unwrap();
        assert!(zero.0.iter().all(|v| *v == 0.0));
        assert!(matches!(
            project_offset(&s.constraint, &DeformationParams::zeros(2)),
            Err(Error::DimensionMismatch { expected: 18, got: 12 })
        ));
    }

    #[test]
    fn projected_deformations_keep_contacts() {
        let s = three_part_shape(5, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // small enough that no leg extent reaches the clamp
        for _ in 0..20 {
            let v: Vec<f64> = (0..18).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let raw = DeformationParams(v);
            assert!(contact_discrepancy(&s, &raw, 0.1).unwrap() > 1e-4);
            let p = project_offset(&s.constraint, &raw).unwrap();
            assert!(contact_discrepancy(&s, &p, 0.1).unwrap() < 1e-6);
        }
    }
}
