//! Exact nearest-neighbor search.
//!
//! Distance ties are broken by the lowest point index, for the brute-force
//! scan and the KD-tree alike, so both return identical answers.

use rayon::prelude::*;

use crate::types::Point3;

/// Point count from which [`NnIndex::build`] switches to a KD-tree.
pub const KD_TREE_MIN_POINTS: usize = 256;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("nearest-neighbor index is empty")]
    Empty,
}

#[inline]
pub fn squared_distance(a: Point3, b: Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone, Copy)]
struct Best {
    d2: f64,
    idx: usize,
}

impl Best {
    #[inline]
    fn offer(&mut self, d2: f64, idx: usize) {
        if d2 < self.d2 || (d2 == self.d2 && idx < self.idx) {
            self.d2 = d2;
            self.idx = idx;
        }
    }
}

#[derive(Debug, Clone)]
enum KdNode {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Point3>,
    perm: Vec<usize>,
    nodes: Vec<KdNode>,
}

impl KdTree {
    pub fn new(points: Vec<Point3>) -> Self {
        let mut tree = Self {
            perm: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        if !tree.points.is_empty() {
            tree.build(0, tree.points.len());
        }
        tree
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return self.nodes.len() - 1;
        }
        // Split on the axis of largest spread.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.perm[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.perm[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = self.points[self.perm[mid]][axis];
        let id = self.nodes.len();
        self.nodes.push(KdNode::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = KdNode::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn search(&self, node: usize, q: Point3, best: &mut Best) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.perm[start..end] {
                    best.offer(squared_distance(q, self.points[i]), i);
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, best);
                // Points on the far side are at least |diff| away; equality
                // is still explored so that lower-index ties are found.
                if diff * diff <= best.d2 {
                    self.search(far, q, best);
                }
            }
        }
    }

    fn nearest(&self, q: Point3) -> Best {
        let mut best = Best {
            d2: f64::INFINITY,
            idx: usize::MAX,
        };
        self.search(0, q, &mut best);
        best
    }
}

/// Spatial index over a fixed point set.
#[derive(Debug, Clone)]
pub enum NnIndex {
    BruteForce(Vec<Point3>),
    KdTree(KdTree),
}

impl NnIndex {
    /// Brute force below [`KD_TREE_MIN_POINTS`] points, KD-tree above.
    pub fn build(points: &[Point3]) -> Self {
        if points.len() < KD_TREE_MIN_POINTS {
            Self::brute_force(points)
        } else {
            Self::kd_tree(points)
        }
    }

    pub fn brute_force(points: &[Point3]) -> Self {
        NnIndex::BruteForce(points.to_vec())
    }

    pub fn kd_tree(points: &[Point3]) -> Self {
        NnIndex::KdTree(KdTree::new(points.to_vec()))
    }

    pub fn len(&self) -> usize {
        match self {
            NnIndex::BruteForce(p) => p.len(),
            NnIndex::KdTree(t) => t.points.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> &[Point3] {
        match self {
            NnIndex::BruteForce(p) => p,
            NnIndex::KdTree(t) => &t.points,
        }
    }

    /// `(index, squared distance)` of the nearest indexed point.
    pub fn nearest_squared(&self, q: Point3) -> Result<(usize, f64), NnError> {
        if self.is_empty() {
            return Err(NnError::Empty);
        }
        let best = match self {
            NnIndex::BruteForce(points) => {
                let mut best = Best {
                    d2: f64::INFINITY,
                    idx: usize::MAX,
                };
                for (i, &p) in points.iter().enumerate() {
                    best.offer(squared_distance(q, p), i);
                }
                best
            }
            NnIndex::KdTree(tree) => tree.nearest(q),
        };
        Ok((best.idx, best.d2))
    }
}

/// Exact nearest neighbor of every query: `(indices, Euclidean distances)`.
pub fn nearest_neighbors(
    queries: &[Point3],
    index: &NnIndex,
) -> Result<(Vec<usize>, Vec<f64>), NnError> {
    if index.is_empty() {
        return Err(NnError::Empty);
    }
    let found: Vec<(usize, f64)> = queries
        .par_iter()
        .with_min_len(256)
        .map(|&q| index.nearest_squared(q).map(|(i, d2)| (i, d2.sqrt())))
        .collect::<Result<_, _>>()?;
    Ok(found.into_iter().unzip())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(queries: &[Point3], points: &[Point3]) -> Vec<(usize, f64)> {
        queries
            .iter()
            .map(|&q| {
                let mut best = (usize::MAX, f64::INFINITY);
                for (i, &p) in points.iter().enumerate() {
                    let d = squared_distance(q, p);
                    if d < best.1 {
                        best = (i, d);
                    }
                }
                best
            })
            .collect()
    }

    #[test]
    fn exact_hit() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [5.0, 5.0, 5.0]];
        for index in [NnIndex::brute_force(&pts), NnIndex::kd_tree(&pts)] {
            let (i, d) = nearest_neighbors(&[[1.0, 2.0, 3.0]], &index).unwrap();
            assert_eq!((i[0], d[0]), (1, 0.0));
        }
    }

    #[test]
    fn two_point_example() {
        let pts = vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let (i, d) = nearest_neighbors(&[[0.9, 0.0, 0.0]], &NnIndex::build(&pts)).unwrap();
        assert_eq!(i, vec![0]);
        assert!((d[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn ties_prefer_lowest_index() {
        let pts = vec![
            [2.0, 0.0, 0.0],
            [0.0, 0.0, 0.0],
            [-2.0, 0.0, 0.0],
            [0.0, 0.0, 0.0],
        ];
        let q = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        for index in [NnIndex::brute_force(&pts), NnIndex::kd_tree(&pts)] {
            let (i, _) = nearest_neighbors(&q, &index).unwrap();
            assert_eq!(i, vec![1, 0, 1]);
        }
        // Many duplicates spread across leaves.
        let dup: Vec<Point3> = (0..100).map(|i| [(i % 3) as f64, 0.0, 0.0]).collect();
        let (i, _) =
            nearest_neighbors(&[[1.0, 0.0, 0.0], [0.4, 0.0, 0.0]], &NnIndex::kd_tree(&dup))
                .unwrap();
        assert_eq!(i, vec![1, 0]);
    }

    #[test]
    fn empty_index_is_an_error() {
        assert_eq!(
            nearest_neighbors(&[[0.0; 3]], &NnIndex::build(&[])).unwrap_err(),
            NnError::Empty
        );
    }

    #[test]
    fn kd_tree_matches_brute_force_512() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cloud = |n: usize| -> Vec<Point3> {
            (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect()
        };
        let pts = cloud(512);
        let qs = cloud(512);
        let (idx, dist) = nearest_neighbors(&qs, &NnIndex::kd_tree(&pts)).unwrap();
        for (k, (i, d2)) in brute(&qs, &pts).into_iter().enumerate() {
            assert_eq!(idx[k], i);
            assert_eq!(dist[k], d2.sqrt());
        }
    }
}
