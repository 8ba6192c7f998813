//! k-d tree with exact and (1+ε)-approximate k-nearest-neighbor search.
//!
//! All distances are squared Euclidean. Results are sorted by
//! `(distance, payload id)`, so ties resolve to the smallest id and `ε = 0`
//! reproduces brute force exactly.
//!
//! Approximate search follows the pruning-radius inflation rule: a subtree is
//! skipped once its cell lies farther than `worst / (1 + ε)²` (squared) from
//! the query, `worst` being the current k-th best distance. Every returned
//! i-th distance is then within `(1 + ε)²` of the true i-th distance.

use std::collections::HashSet;

use crate::error::{Error, Result};

/// Maximum number of vectors stored in a leaf.
pub const LEAF_SIZE: usize = 8;

/// Relative slack applied before pruning a cell. Cell distances are
/// accumulated incrementally and can differ from a freshly summed point
/// distance by a few ulps; the slack keeps exact search exact.
const PRUNE_SLACK: f64 = 1e-12;

/// One search hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    pub sq_dist: f64,
}

pub type SearchResult = Vec<Neighbor>;

#[derive(Debug, Clone)]
enum Node {
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
    dim: usize,
    /// Vectors in leaf order, row-major.
    data: Vec<f64>,
    ids: Vec<u64>,
    nodes: Vec<Node>,
}

/// Squared Euclidean distance, summed in index order.
#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Same summation as [`squared_distance`], abandoned as soon as the partial
/// sum exceeds `bound`. Partial sums of non-negative terms never decrease, so
/// `None` implies the full distance is strictly greater than `bound`.
#[inline]
fn bounded_squared_distance(a: &[f64], b: &[f64], bound: f64) -> Option<f64> {
    let mut acc = 0.0;
    for (ca, cb) in a.chunks(16).zip(b.chunks(16)) {
        for (x, y) in ca.iter().zip(cb) {
            let d = x - y;
            acc += d * d;
        }
        if acc > bound {
            return None;
        }
    }
    Some(acc)
}

fn cmp_hit(a: &Neighbor, b: &Neighbor) -> std::cmp::Ordering {
    a.sq_dist.total_cmp(&b.sq_dist).then(a.id.cmp(&b.id))
}

/// Bounded sorted candidate list.
struct Candidates {
    k: usize,
    hits: Vec<Neighbor>,
}

impl Candidates {
    fn new(k: usize) -> Self {
        Self {
            k,
            hits: Vec::with_capacity(k + 1),
        }
    }

    fn is_full(&self) -> bool {
        self.hits.len() == self.k
    }

    fn worst(&self) -> f64 {
        if self.is_full() {
            self.hits[self.k - 1].sq_dist
        } else {
            f64::INFINITY
        }
    }

    fn offer(&mut self, hit: Neighbor) {
        if self.is_full() && cmp_hit(&hit, &self.hits[self.k - 1]).is_ge() {
            return;
        }
        let pos = self
            .hits
            .partition_point(|h| cmp_hit(h, &hit).is_lt());
        self.hits.insert(pos, hit);
        self.hits.truncate(self.k);
    }
}

impl KdTree {
    /// Builds a tree from `(id, vector)` pairs.
    pub fn build<I, V>(dim: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u64, V)>,
        V: AsRef<[f64]>,
    {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (id, v) in entries {
            let v = v.as_ref();
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: format!("k-d tree entry {id}"),
                    expected: dim,
                    actual: v.len(),
                });
            }
            ids.push(id);
            data.extend_from_slice(v);
        }
        Self::from_flat(dim, ids, data)
    }

    /// Builds a tree from a row-major matrix with one payload id per row.
    pub fn from_flat(dim: usize, ids: Vec<u64>, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension", "must be at least 1"));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::DimensionMismatch {
                context: "k-d tree matrix".into(),
                expected: ids.len() * dim,
                actual: data.len(),
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in &ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateId {
                    context: "k-d tree".into(),
                    id,
                });
            }
        }

        let mut order: Vec<usize> = (0..ids.len()).collect();
        let mut nodes = Vec::new();
        if !order.is_empty() {
            build_node(&data, &ids, dim, &mut order, 0, &mut nodes);
        }

        let mut sorted = Vec::with_capacity(data.len());
        let mut sorted_ids = Vec::with_capacity(ids.len());
        for &i in &order {
            sorted.extend_from_slice(&data[i * dim..(i + 1) * dim]);
            sorted_ids.push(ids[i]);
        }
        Ok(Self {
            dim,
            data: sorted,
            ids: sorted_ids,
            nodes,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Stored vector for a payload id, if present. Linear scan; meant for tests
    /// and diagnostics.
    pub fn vector_of(&self, id: u64) -> Option<&[f64]> {
        let i = self.ids.iter().position(|&x| x == id)?;
        Some(&self.data[i * self.dim..(i + 1) * self.dim])
    }

    /// The `k` nearest stored vectors to `query`, ascending by
    /// `(squared distance, id)`.
    pub fn knn(&self, query: &[f64], k: usize, epsilon: f64) -> Result<SearchResult> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "k-d tree query".into(),
                expected: self.dim,
                actual: query.len(),
            });
        }
        if k < 1 {
            return Err(Error::invalid("k", "must be at least 1"));
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::invalid("epsilon", format!("{epsilon} is not a finite value >= 0")));
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let mut search = Search {
            tree: self,
            query,
            prune_scale: (1.0 + epsilon).powi(2) * (1.0 - PRUNE_SLACK),
            offsets: vec![0.0; self.dim],
            candidates: Candidates::new(k.min(self.len())),
        };
        search.visit(0, 0.0);
        Ok(search.candidates.hits)
    }
}

fn build_node(
    data: &[f64],
    ids: &[u64],
    dim: usize,
    order: &mut [usize],
    offset: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let index = nodes.len();
    let leaf = Node::Leaf {
        start: offset,
        end: offset + order.len(),
    };
    if order.len() <= LEAF_SIZE {
        nodes.push(leaf);
        return index;
    }

    // Axis of maximum spread; first axis wins ties.
    let mut axis = 0;
    let mut best_spread = -1.0;
    for d in 0..dim {
        let (lo, hi) = order.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            let v = data[i * dim + d];
            (lo.min(v), hi.max(v))
        });
        if hi - lo > best_spread {
            best_spread = hi - lo;
            axis = d;
        }
    }
    if best_spread <= 0.0 {
        // All vectors identical: splitting cannot separate them.
        nodes.push(leaf);
        return index;
    }

    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        data[a * dim + axis]
            .total_cmp(&data[b * dim + axis])
            .then(ids[a].cmp(&ids[b]))
    });
    let value = data[order[mid] * dim + axis];

    nodes.push(Node::Split {
        axis,
        value,
        left: 0,
        right: 0,
    });
    let (lo, hi) = order.split_at_mut(mid);
    let left = build_node(data, ids, dim, lo, offset, nodes);
    let right = build_node(data, ids, dim, hi, offset + mid, nodes);
    if let Node::Split {
        left: l, right: r, ..
    } = &mut nodes[index]
    {
        *l = left;
        *r = right;
    }
    index
}

struct Search<'a> {
    tree: &'a KdTree,
    query: &'a [f64],
    prune_scale: f64,
    /// Per-axis offset from the query to the current cell.
    offsets: Vec<f64>,
    candidates: Candidates,
}

impl Search<'_> {
    fn visit(&mut self, node: usize, cell_dist: f64) {
        match self.tree.nodes[node] {
            Node::Leaf { start, end } => {
                let dim = self.tree.dim;
                for i in start..end {
                    let v = &self.tree.data[i * dim..(i + 1) * dim];
                    let bound = self.candidates.worst();
                    if let Some(d) = bounded_squared_distance(self.query, v, bound) {
                        self.candidates.offer(Neighbor {
                            id: self.tree.ids[i],
                            sq_dist: d,
                        });
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = self.query[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.visit(near, cell_dist);

                let old = self.offsets[axis];
                let far_dist = cell_dist - old * old + diff * diff;
                if far_dist * self.prune_scale > self.candidates.worst() {
                    return;
                }
                self.offsets[axis] = diff;
                self.visit(far, far_dist);
                self.offsets[axis] = old;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive reference: every distance, sorted by `(distance, id)`.
    fn brute_force(entries: &[(u64, Vec<f64>)], q: &[f64], k: usize) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = entries
            .iter()
            .map(|(id, v)| Neighbor {
                id: *id,
                sq_dist: v.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum(),
            })
            .collect();
        all.sort_by(|a, b| a.sq_dist.partial_cmp(&b.sq_dist).unwrap().then(a.id.cmp(&b.id)));
        all.truncate(k);
        all
    }

    fn random_entries(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<(u64, Vec<f64>)> {
        (0..n)
            .map(|i| (i as u64 * 3 + 1, (0..dim).map(|_| rng.random::<f64>()).collect()))
            .collect()
    }

    #[test]
    fn empty_tree_returns_nothing() {
        let tree = KdTree::build(3, Vec::<(u64, Vec<f64>)>::new()).unwrap();
        assert_eq!(tree.len(), 0);
        assert!(tree.knn(&[0.0, 0.0, 0.0], 4, 0.0).unwrap().is_empty());
    }

    #[test]
    fn single_vector_tree() {
        let tree = KdTree::build(2, [(7u64, vec![1.0, 2.0])]).unwrap();
        assert_eq!(tree.len(), 1);
        let hits = tree.knn(&[1.0, 2.0], 3, 0.0).unwrap();
        assert_eq!(hits, vec![Neighbor { id: 7, sq_dist: 0.0 }]);
    }

    #[test]
    fn two_point_example() {
        let tree = KdTree::build(2, [(0u64, vec![0.0, 0.0]), (1, vec![3.0, 4.0])]).unwrap();
        assert_eq!(
            tree.knn(&[0.0, 1.0], 1, 0.0).unwrap(),
            vec![Neighbor { id: 0, sq_dist: 1.0 }]
        );
        assert_eq!(
            tree.knn(&[0.0, 1.0], 2, 0.0).unwrap(),
            vec![
                Neighbor { id: 0, sq_dist: 1.0 },
                Neighbor { id: 1, sq_dist: 18.0 }
            ]
        );
    }

    #[test]
    fn build_errors() {
        assert!(matches!(
            KdTree::build(2, [(0u64, vec![0.0, 0.0]), (1, vec![1.0])]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            KdTree::build(1, [(4u64, vec![0.0]), (4, vec![1.0])]),
            Err(Error::DuplicateId { id: 4, .. })
        ));
    }

    #[test]
    fn query_errors() {
        let tree = KdTree::build(2, [(0u64, vec![0.0, 0.0])]).unwrap();
        assert!(tree.knn(&[0.0], 1, 0.0).is_err());
        assert!(tree.knn(&[0.0, 0.0], 0, 0.0).is_err());
        assert!(tree.knn(&[0.0, 0.0], 1, -1.0).is_err());
    }

    #[test]
    fn ties_resolve_to_smallest_id() {
        // Lattice with each site repeated three times, ids shuffled so that
        // storage order and id order disagree.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ids: Vec<u64> = (0..147).collect();
        ids.shuffle(&mut rng);
        let mut entries = Vec::new();
        for x in -3..=3 {
            for y in -3..=3 {
                for _ in 0..3 {
                    entries.push((ids[entries.len()], vec![x as f64, y as f64]));
                }
            }
        }
        let tree = KdTree::build(2, entries.clone()).unwrap();
        for q in [[0.0, 0.0], [0.5, 0.5], [1.0, -0.5], [3.0, 3.0]] {
            for k in [1, 4, 9, 20] {
                assert_eq!(tree.knn(&q, k, 0.0).unwrap(), brute_force(&entries, &q, k));
            }
        }
    }

    #[test]
    fn self_query_on_512_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let entries = random_entries(&mut rng, 1000, 512);
        let tree = KdTree::build(512, entries.clone()).unwrap();
        assert_eq!(tree.len(), 1000);
        for (id, v) in &entries {
            let hit = tree.knn(v, 1, 0.0).unwrap()[0];
            assert_eq!(hit, Neighbor { id: *id, sq_dist: 0.0 });
        }
    }

    #[test]
    fn exact_search_matches_brute_force_128d() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let entries = random_entries(&mut rng, 1000, 128);
        let tree = KdTree::build(128, entries.clone()).unwrap();
        for _ in 0..100 {
            let q: Vec<f64> = (0..128).map(|_| rng.random()).collect();
            assert_eq!(tree.knn(&q, 5, 0.0).unwrap(), brute_force(&entries, &q, 5));
        }
    }

    #[test]
    fn approximate_search_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let entries = random_entries(&mut rng, 1000, 128);
        let tree = KdTree::build(128, entries.clone()).unwrap();
        for _ in 0..100 {
            let q: Vec<f64> = (0..128).map(|_| rng.random()).collect();
            let exact = brute_force(&entries, &q, 5);
            let approx = tree.knn(&q, 5, 3.0).unwrap();
            assert_eq!(approx.len(), 5);
            for (a, e) in approx.iter().zip(&exact) {
                assert!(a.sq_dist <= 16.0 * e.sq_dist);
            }
        }
    }

    #[test]
    fn build_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let entries = random_entries(&mut rng, 300, 4);
        let a = KdTree::build(4, entries.clone()).unwrap();
        let b = KdTree::build(4, entries).unwrap();
        assert_eq!(a.ids, b.ids);
        assert_eq!(a.data, b.data);
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert_eq, proptest};

        proptest! {
            #[test]
            fn k_plus_one_extends_k(
                seed in any::<u64>(),
                n in 1usize..200,
                k in 1usize..12,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                // Coarse grid values produce plenty of ties.
                let entries: Vec<(u64, Vec<f64>)> = (0..n)
                    .map(|i| (i as u64, (0..3).map(|_| rng.random_range(0..4) as f64).collect()))
                    .collect();
                let tree = KdTree::build(3, entries.clone()).unwrap();
                let q: Vec<f64> = (0..3).map(|_| rng.random_range(0..4) as f64).collect();
                let small = tree.knn(&q, k, 0.0).unwrap();
                let large = tree.knn(&q, k + 1, 0.0).unwrap();
                prop_assert_eq!(small.len(), k.min(n));
                prop_assert_eq!(&large[..small.len()], &small[..]);
                prop_assert_eq!(large, brute_force(&entries, &q, k + 1));
            }
        }
    }
}
