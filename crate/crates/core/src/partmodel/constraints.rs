//! Contact detection between part boxes and the linear connectivity
//! constraints they induce on the deformation parameters.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Part, PARAMS_PER_PART};
use crate::geometry::{dist2, keypoint_coords, Vec3};

/// Default keypoint distance below which two parts count as connected.
pub const DEFAULT_TAU: f64 = 0.05;

/// Singular values below this fraction of the largest are treated as zero.
const RANK_CUTOFF: f64 = 1e-10;

/// A contact point shared by two parts (`parts.0 < parts.1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub parts: (usize, usize),
    pub point: Vec3,
}

/// Constraint matrix `B` over the parameter offsets of a shape and the
/// orthogonal projector onto its nullspace.
#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    pub contacts: Vec<Contact>,
    /// 3 rows per contact, 6 columns per part.
    pub b: DMatrix<f64>,
    /// `Q Qᵀ` with `Q` an orthonormal nullspace basis of `b`.
    pub projector: DMatrix<f64>,
}

impl ConstraintSystem {
    pub fn from_contacts(parts: &[Part], contacts: Vec<Contact>) -> Self {
        let cols = parts.len() * PARAMS_PER_PART;
        let mut b = DMatrix::zeros(3 * contacts.len(), cols);
        for (r, c) in contacts.iter().enumerate() {
            let (i, j) = c.parts;
            for a in 0..3 {
                let row = 3 * r + a;
                let bi = &parts[i].bbox;
                let bj = &parts[j].bbox;
                let wi = (c.point[a] - bi.center[a]) / bi.dims[a];
                let wj = (c.point[a] - bj.center[a]) / bj.dims[a];
                b[(row, 6 * i + a)] = 1.0;
                b[(row, 6 * i + 3 + a)] = wi;
                b[(row, 6 * j + a)] = -1.0;
                b[(row, 6 * j + 3 + a)] = -wj;
            }
        }
        let projector = nullspace_projector(&b);
        Self {
            contacts,
            b,
            projector,
        }
    }

    pub fn dim(&self) -> usize {
        self.projector.nrows()
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        matvec(&self.projector, v)
    }

    /// `B · v`.
    pub fn residual(&self, v: &[f64]) -> Vec<f64> {
        matvec(&self.b, v)
    }

    /// Rank of the nullspace (number of free deformation directions).
    pub fn free_dims(&self) -> usize {
        let tr: f64 = (0..self.dim()).map(|i| self.projector[(i, i)]).sum();
        tr.round() as usize
    }
}

pub(crate) fn matvec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    assert_eq!(m.ncols(), v.len(), "matrix/vector size mismatch");
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)] * v[c]).sum())
        .collect()
}

/// Projector onto the nullspace of `b`, built from the right singular vectors
/// whose singular values fall under the rank cutoff.
fn nullspace_projector(b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = b.ncols();
    if b.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    // pad with zero rows so the decomposition yields a full n×n V
    let padded = if b.nrows() < n {
        let mut p = DMatrix::zeros(n, n);
        p.view_mut((0, 0), (b.nrows(), n)).copy_from(b);
        p
    } else {
        b.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = RANK_CUTOFF * sigma_max.max(f64::MIN_POSITIVE);
    let null_rows: Vec<usize> = (0..v_t.nrows())
        .filter(|&k| svd.singular_values[k] <= cut)
        .collect();
    let mut q = DMatrix::zeros(n, null_rows.len());
    for (col, &k) in null_rows.iter().enumerate() {
        for r in 0..n {
            q[(r, col)] = v_t[(k, r)];
        }
    }
    &q * q.transpose()
}

/// Finds connected part pairs by their closest AABB keypoints and returns the
/// resulting constraint system.
///
/// A pair is connected when the closest keypoint pair lies strictly closer
/// than `tau`; its contact is the midpoint of that pair. Equal distances are
/// resolved by the lowest (keypoint of i, keypoint of j) index pair.
pub fn extract_contacts(parts: &[Part], tau: f64) -> ConstraintSystem {
    let canon = keypoint_coords();
    let keypoints: Vec<[Vec3; 26]> = parts
        .iter()
        .map(|p| canon.map(|w| p.bbox.at(&w)))
        .collect();
    let mut contacts = Vec::new();
    for i in 0..parts.len() {
        for j in i + 1..parts.len() {
            let mut best = (f64::INFINITY, 0, 0);
            for (ki, a) in keypoints[i].iter().enumerate() {
                for (kj, b) in keypoints[j].iter().enumerate() {
                    let d = dist2(a, b);
                    if d < best.0 {
                        best = (d, ki, kj);
                    }
                }
            }
            if best.0.sqrt() < tau {
                let a = keypoints[i][best.1];
                let b = keypoints[j][best.2];
                contacts.push(Contact {
                    parts: (i, j),
                    point: [0, 1, 2].map(|k| 0.5 * (a[k] + b[k])),
                });
            }
        }
    }
    ConstraintSystem::from_contacts(parts, contacts)
}
