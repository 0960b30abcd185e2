//! Point-cloud primitives: storage, surface sampling, exact nearest-neighbour
//! indexing, chamfer distance and the yz-plane reflection.

pub mod io;
mod kdtree;

pub use kdtree::SpatialIndex;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Smallest box extent the deformation map will ever divide by.
pub const MIN_EXTENT: f64 = 1e-4;

#[inline]
pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn mirror(p: &Vec3) -> Vec3 {
    [-p[0], p[1], p[2]]
}

/// An ordered, non-empty set of finite 3D points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec3>", into = "Vec<Vec3>")]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(index) = points
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; kept for API symmetry with collections.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    pub fn translated(&self, t: &Vec3) -> PointCloud {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
                .collect(),
        }
    }

    /// Axis-aligned bounds of the cloud as (min, max).
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }
}

impl TryFrom<Vec<Vec3>> for PointCloud {
    type Error = Error;
    fn try_from(points: Vec<Vec3>) -> Result<Self> {
        PointCloud::new(points)
    }
}

impl From<PointCloud> for Vec<Vec3> {
    fn from(c: PointCloud) -> Self {
        c.points
    }
}

/// Axis-aligned box given by its center and full extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub center: Vec3,
    pub dims: Vec3,
}

impl Aabb {
    /// Builds a box, clamping degenerate extents to [`MIN_EXTENT`].
    pub fn new(center: Vec3, dims: Vec3) -> Self {
        Self {
            center,
            dims: dims.map(|d| d.max(MIN_EXTENT)),
        }
    }

    pub fn min(&self) -> Vec3 {
        [0, 1, 2].map(|a| self.center[a] - 0.5 * self.dims[a])
    }

    pub fn max(&self) -> Vec3 {
        [0, 1, 2].map(|a| self.center[a] + 0.5 * self.dims[a])
    }

    pub fn contains(&self, p: &Vec3, slack: f64) -> bool {
        (0..3).all(|a| (p[a] - self.center[a]).abs() <= 0.5 * self.dims[a] + slack)
    }

    pub fn surface_area(&self) -> f64 {
        let [x, y, z] = self.dims;
        2.0 * (x * y + y * z + z * x)
    }

    /// Point at normalized box coordinates `w` (each component in [-0.5, 0.5]).
    pub fn at(&self, w: &Vec3) -> Vec3 {
        [0, 1, 2].map(|a| self.center[a] + w[a] * self.dims[a])
    }

    /// The 26 keypoints: 6 face centers, then 12 edge midpoints, then 8 corners,
    /// each group in lexicographic order of its normalized coordinates.
    pub fn keypoints(&self) -> [Vec3; 26] {
        let w = keypoint_coords();
        let mut out = [[0.0; 3]; 26];
        for (o, wk) in out.iter_mut().zip(w.iter()) {
            *o = self.at(wk);
        }
        out
    }

    /// Closed cuboid surface: 8 vertices, 12 outward-facing triangles.
    pub fn to_mesh(&self) -> TriangleMesh {
        let lo = self.min();
        let hi = self.max();
        let vertices = (0..8)
            .map(|i| {
                [
                    if i & 1 == 0 { lo[0] } else { hi[0] },
                    if i & 2 == 0 { lo[1] } else { hi[1] },
                    if i & 4 == 0 { lo[2] } else { hi[2] },
                ]
            })
            .collect();
        let quads: [[usize; 4]; 6] = [
            [0, 4, 6, 2], // -x
            [1, 3, 7, 5], // +x
            [0, 1, 5, 4], // -y
            [2, 6, 7, 3], // +y
            [0, 2, 3, 1], // -z
            [4, 5, 7, 6], // +z
        ];
        let triangles = quads
            .iter()
            .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
            .collect();
        TriangleMesh {
            vertices,
            triangles,
        }
    }
}

/// Normalized coordinates of the 26 box keypoints in canonical order.
pub fn keypoint_coords() -> [Vec3; 26] {
    let vals = [-0.5, 0.0, 0.5];
    let mut groups: [Vec<Vec3>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for &x in &vals {
        for &y in &vals {
            for &z in &vals {
                let nonzero = [x, y, z].iter().filter(|v| **v != 0.0).count();
                if nonzero > 0 {
                    groups[nonzero - 1].push([x, y, z]);
                }
            }
        }
    }
    let mut out = [[0.0; 3]; 26];
    for (o, w) in out.iter_mut().zip(groups.iter().flatten()) {
        *o = *w;
    }
    out
}

/// Indexed triangle mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        let n = cross(&sub(&b, &a), &sub(&c, &a));
        0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn merge(meshes: &[TriangleMesh]) -> TriangleMesh {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for m in meshes {
            let base = vertices.len();
            vertices.extend_from_slice(&m.vertices);
            triangles.extend(m.triangles.iter().map(|t| t.map(|i| i + base)));
        }
        TriangleMesh {
            vertices,
            triangles,
        }
    }
}

/// Uniform area-weighted surface sample of `n` points together with the
/// triangle each point fell on.
pub fn sample_surface_with_faces<R: Rng + ?Sized>(
    mesh: &TriangleMesh,
    n: usize,
    rng: &mut R,
) -> Result<(PointCloud, Vec<usize>)> {
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    let areas: Vec<f64> = (0..mesh.triangles.len())
        .map(|t| mesh.triangle_area(t))
        .collect();
    let total: f64 = areas.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroArea);
    }
    let pick = WeightedIndex::new(&areas).map_err(|_| Error::ZeroArea)?;
    let mut points = Vec::with_capacity(n);
    let mut faces = Vec::with_capacity(n);
    for _ in 0..n {
        let t = pick.sample(rng);
        let [a, b, c] = mesh.triangles[t].map(|i| mesh.vertices[i]);
        let r1: f64 = rng.gen::<f64>().sqrt();
        let r2: f64 = rng.gen();
        let (u, v, w) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
        points.push([0, 1, 2].map(|k| u * a[k] + v * b[k] + w * c[k]));
        faces.push(t);
    }
    Ok((PointCloud::new(points)?, faces))
}

/// Uniform area-weighted surface sample of `n` points.
pub fn sample_surface<R: Rng + ?Sized>(
    mesh: &TriangleMesh,
    n: usize,
    rng: &mut R,
) -> Result<PointCloud> {
    sample_surface_with_faces(mesh, n, rng).map(|(c, _)| c)
}

/// Negates the x coordinate of every point.
pub fn reflect_yz(cloud: &PointCloud) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(mirror).collect(),
    }
}

/// Nearest-neighbour assignments in both directions between two clouds.
#[derive(Debug, Clone)]
pub struct ChamferMatch {
    /// For each point of `a`, index of its nearest point in `b`.
    pub a_to_b: Vec<usize>,
    /// For each point of `b`, index of its nearest point in `a`.
    pub b_to_a: Vec<usize>,
    pub forward: f64,
    pub backward: f64,
}

impl ChamferMatch {
    pub fn compute(a: &SpatialIndex, b: &SpatialIndex) -> Self {
        let (a_to_b, forward) = nearest_all(a.points(), b);
        let (b_to_a, backward) = nearest_all(b.points(), a);
        Self {
            a_to_b,
            b_to_a,
            forward,
            backward,
        }
    }

    pub fn value(&self) -> f64 {
        self.forward + self.backward
    }

    /// Gradient of the chamfer value with respect to each point of `a`,
    /// assignments held fixed.
    pub fn grad_a(&self, a: &[Vec3], b: &[Vec3]) -> Vec<Vec3> {
        let wa = 2.0 / a.len() as f64;
        let wb = 2.0 / b.len() as f64;
        let mut g: Vec<Vec3> = a
            .iter()
            .zip(&self.a_to_b)
            .map(|(p, &j)| sub(p, &b[j]).map(|d| wa * d))
            .collect();
        for (q, &i) in b.iter().zip(&self.b_to_a) {
            let d = sub(&a[i], q);
            for k in 0..3 {
                g[i][k] += wb * d[k];
            }
        }
        g
    }
}

/// Mean squared nearest-neighbour distance from each query to the index,
/// with the chosen neighbour per query.
fn nearest_all(queries: &[Vec3], index: &SpatialIndex) -> (Vec<usize>, f64) {
    let mut nn = Vec::with_capacity(queries.len());
    let mut sum = 0.0;
    for q in queries {
        let (j, d2) = index.nearest(q);
        nn.push(j);
        sum += d2;
    }
    (nn, sum / queries.len() as f64)
}

/// Symmetric chamfer distance: mean squared nearest-neighbour distance from
/// `a` to `b` plus the same from `b` to `a`.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    let ia = SpatialIndex::build(a);
    let ib = SpatialIndex::build(b);
    chamfer_indexed(&ia, &ib)
}

pub fn chamfer_indexed(a: &SpatialIndex, b: &SpatialIndex) -> f64 {
    nearest_all(a.points(), b).1 + nearest_all(b.points(), a).1
}

/// Chamfer of a raw point slice against a prebuilt index; used on hot paths
/// where the other side is fixed.
pub fn chamfer_points(a: &[Vec3], b: &SpatialIndex) -> f64 {
    let ia = SpatialIndex::from_points(a.to_vec());
    chamfer_indexed(&ia, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(pts: &[Vec3]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    #[test]
    fn rejects_empty_and_nan() {
        assert!(matches!(PointCloud::new(vec![]), Err(Error::EmptyCloud)));
        assert!(matches!(
            PointCloud::new(vec![[0.0; 3], [f64::NAN, 0.0, 0.0]]),
            Err(Error::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn chamfer_identity_and_unit_pair() {
        let x = cloud(&[[0.1, 0.2, 0.3], [-1.0, 0.5, 0.0]]);
        assert_eq!(chamfer(&x, &x), 0.0);
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b), 2.0);
    }

    #[test]
    fn reflection_is_an_involution() {
        let x = cloud(&[[1.0, 2.0, 3.0], [-0.25, 0.0, 1.0]]);
        let r = reflect_yz(&x);
        assert_eq!(r.points()[0], [-1.0, 2.0, 3.0]);
        assert_eq!(reflect_yz(&r), x);
    }

    #[test]
    fn symmetric_set_has_zero_mirror_chamfer() {
        let x = cloud(&[[0.5, 1.0, 0.0], [-0.5, 1.0, 0.0], [0.0, -1.0, 2.0]]);
        assert_eq!(chamfer(&x, &reflect_yz(&x)), 0.0);
    }

    #[test]
    fn keypoints_are_grouped_faces_edges_corners() {
        let w = keypoint_coords();
        let nz = |v: &Vec3| v.iter().filter(|c| **c != 0.0).count();
        assert!(w[..6].iter().all(|v| nz(v) == 1));
        assert!(w[6..18].iter().all(|v| nz(v) == 2));
        assert!(w[18..].iter().all(|v| nz(v) == 3));
    }

    #[test]
    fn cuboid_mesh_area_matches_box() {
        let b = Aabb::new([0.1, 0.2, 0.3], [1.0, 2.0, 0.5]);
        let m = b.to_mesh();
        assert!((m.area() - b.surface_area()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_dims_are_clamped() {
        let b = Aabb::new([0.0; 3], [0.0, 1.0, -2.0]);
        assert_eq!(b.dims, [MIN_EXTENT, 1.0, MIN_EXTENT]);
    }

    fn unit_square() -> TriangleMesh {
        TriangleMesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [1.0, 1.0, 0.0],
                [0.0, 1.0, 0.0],
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
        }
    }

    #[test]
    fn sampling_splits_by_area() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let (_, faces) = sample_surface_with_faces(&unit_square(), n, &mut rng).unwrap();
        let share = faces.iter().filter(|f| **f == 0).count() as f64 / n as f64;
        assert!((share - 0.5).abs() < 0.01, "share {share}");
    }

    #[test]
    fn single_sample_lies_on_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = sample_surface(&unit_square(), 1, &mut rng).unwrap();
        let p = c.points()[0];
        assert_eq!(c.len(), 1);
        assert_eq!(p[2], 0.0);
        assert!((0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]));
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let m = Aabb::new([0.0; 3], [1.0, 0.5, 0.25]).to_mesh();
        let a = sample_surface(&m, 64, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_surface(&m, 64, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_area_is_rejected() {
        let m = TriangleMesh {
            vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_surface(&m, 10, &mut rng),
            Err(Error::ZeroArea)
        ));
    }
}
