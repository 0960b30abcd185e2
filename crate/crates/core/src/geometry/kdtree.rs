//! Exact nearest-neighbour kd-tree over a fixed point set.

use super::{dist2, PointCloud, Vec3};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: u32,
        end: u32,
    },
    Split {
        axis: u8,
        value: f64,
        left: u32,
        right: u32,
    },
}

/// Immutable kd-tree answering exact nearest-neighbour queries.
///
/// Ties between equidistant points resolve to the lowest original index, so
/// results never depend on tree shape.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Vec3>,
    /// Points reordered so that each leaf is contiguous.
    sorted: Vec<Vec3>,
    /// `sorted[k]` is `points[order[k]]`.
    order: Vec<u32>,
    nodes: Vec<Node>,
}

impl SpatialIndex {
    pub fn build(cloud: &PointCloud) -> Self {
        Self::from_points(cloud.points().to_vec())
    }

    /// Builds from raw points. Panics on an empty slice; [`PointCloud`]
    /// guarantees non-emptiness on the public path.
    pub fn from_points(points: Vec<Vec3>) -> Self {
        assert!(!points.is_empty(), "spatial index needs at least one point");
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        build_node(&points, &mut order, 0, &mut nodes);
        let sorted = order.iter().map(|&i| points[i as usize]).collect();
        Self {
            points,
            sorted,
            order,
            nodes,
        }
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and squared distance of the nearest stored point.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        let mut best = (u32::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        (best.0 as usize, best.1)
    }

    fn search(&self, node: usize, q: &Vec3, best: &mut (u32, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for k in start as usize..end as usize {
                    let d = dist2(q, &self.sorted[k]);
                    let idx = self.order[k];
                    if d < best.1 || (d == best.1 && idx < best.0) {
                        *best = (idx, d);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis as usize] - value;
                let (near, far) = if diff <= 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near as usize, q, best);
                if diff * diff <= best.1 {
                    self.search(far as usize, q, best);
                }
            }
        }
    }
}

fn build_node(points: &[Vec3], order: &mut [u32], offset: usize, nodes: &mut Vec<Node>) -> u32 {
    let id = nodes.len() as u32;
    if order.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset as u32,
            end: (offset + order.len()) as u32,
        });
        return id;
    }
    // split on the widest axis at the median
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        let p = &points[i as usize];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(0);
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&i, &j| {
        points[i as usize][axis].total_cmp(&points[j as usize][axis])
    });
    let value = points[order[mid] as usize][axis];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (left_part, right_part) = order.split_at_mut(mid);
    let left = build_node(points, left_part, offset, nodes);
    let right = build_node(points, right_part, offset + mid, nodes);
    nodes[id as usize] = Node::Split {
        axis: axis as u8,
        value,
        left,
        right,
    };
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[Vec3], q: &Vec3) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d = dist2(q, p);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    #[test]
    fn singleton_answers_every_query() {
        let idx = SpatialIndex::from_points(vec![[0.3, -0.2, 0.9]]);
        assert_eq!(idx.nearest(&[5.0, 5.0, 5.0]).0, 0);
        assert_eq!(idx.nearest(&[0.3, -0.2, 0.9]), (0, 0.0));
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let pts: Vec<Vec3> = (0..512)
            .map(|_| [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0)))
            .collect();
        let idx = SpatialIndex::from_points(pts.clone());
        for _ in 0..1000 {
            let q = [0, 1, 2].map(|_| rng.gen_range(-1.2..1.2));
            assert_eq!(idx.nearest(&q), brute(&pts, &q));
        }
    }

    #[test]
    fn duplicates_resolve_to_lowest_index() {
        let mut pts = vec![[0.0, 0.0, 0.0]; 20];
        pts.push([0.5, 0.5, 0.5]);
        pts.push([0.5, 0.5, 0.5]);
        let idx = SpatialIndex::from_points(pts);
        assert_eq!(idx.nearest(&[0.5, 0.5, 0.5]), (20, 0.0));
        assert_eq!(idx.nearest(&[0.0, 0.0, 0.0]), (0, 0.0));
    }
}
