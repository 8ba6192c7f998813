//! Grouping of retrieved prior frames into places.
//!
//! Two prior frames belong to the same place when they are linked by a chain
//! of shared landmarks, considering only the prior frames themselves.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::map::{KeyframeId, LandmarkId, VisualMap};

/// A connected component of prior frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Place {
    /// Position in the evaluation order, starting at 0.
    pub rank: usize,
    /// Ascending.
    pub keyframe_ids: Vec<KeyframeId>,
    /// Every landmark observed by the place's keyframes, ascending.
    pub landmark_ids: Vec<LandmarkId>,
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        if self.size[a] < self.size[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        self.size[a] += self.size[b];
    }
}

/// Partitions `prior_ids` into places, largest first. Ties are broken by the
/// smallest keyframe id in each place. Repeated ids are counted once.
pub fn cluster_priors(map: &VisualMap, prior_ids: &[KeyframeId]) -> Result<Vec<Place>> {
    if prior_ids.is_empty() {
        return Err(Error::invalid("prior_ids", "at least one prior frame is required"));
    }
    let mut frames: Vec<KeyframeId> = prior_ids.to_vec();
    frames.sort_unstable();
    frames.dedup();

    let observed: Vec<&[LandmarkId]> = frames
        .iter()
        .map(|&id| map.observed_landmarks(id))
        .collect::<Result<_>>()?;

    let mut uf = UnionFind::new(frames.len());
    let mut first_seen: HashMap<LandmarkId, usize> = HashMap::new();
    for (i, landmarks) in observed.iter().enumerate() {
        for &lm in *landmarks {
            match first_seen.get(&lm) {
                Some(&j) => uf.union(i, j),
                None => {
                    first_seen.insert(lm, i);
                }
            }
        }
    }

    // Frames are ascending, so the first member of each group is its minimum.
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut group_of_root: HashMap<usize, usize> = HashMap::new();
    for i in 0..frames.len() {
        let root = uf.find(i);
        let g = *group_of_root.entry(root).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    groups.sort_by(|a, b| b.len().cmp(&a.len()).then(frames[a[0]].cmp(&frames[b[0]])));

    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(rank, members)| {
            let mut landmark_ids: Vec<LandmarkId> = members
                .iter()
                .flat_map(|&i| observed[i].iter().copied())
                .collect();
            landmark_ids.sort_unstable();
            landmark_ids.dedup();
            Place {
                rank,
                keyframe_ids: members.iter().map(|&i| frames[i]).collect(),
                landmark_ids,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::tests::{camera, keyframe, landmark};

    fn ids(v: &[u64]) -> Vec<KeyframeId> {
        v.iter().map(|&i| KeyframeId(i)).collect()
    }

    /// Frames 10, 11, 12 share landmarks with each other; 20 and 21 share one.
    fn two_component_map() -> VisualMap {
        VisualMap::new(
            camera(),
            2,
            2,
            [10, 11, 12, 20, 21].iter().map(|&k| keyframe(k, 3)).collect(),
            vec![
                landmark(1, &[(10, 0), (11, 0)]),
                landmark(2, &[(11, 1), (12, 0)]),
                landmark(3, &[(12, 1)]),
                landmark(4, &[(20, 0), (21, 0)]),
                landmark(5, &[(21, 1)]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn two_components_largest_first() {
        let map = two_component_map();
        let places = cluster_priors(&map, &ids(&[21, 10, 20, 12, 11])).unwrap();
        assert_eq!(places.len(), 2);
        assert_eq!(places[0].rank, 0);
        assert_eq!(places[0].keyframe_ids, ids(&[10, 11, 12]));
        assert_eq!(
            places[0].landmark_ids,
            vec![LandmarkId(1), LandmarkId(2), LandmarkId(3)]
        );
        assert_eq!(places[1].keyframe_ids, ids(&[20, 21]));
        assert_eq!(places[1].landmark_ids, vec![LandmarkId(4), LandmarkId(5)]);
    }

    #[test]
    fn unretrieved_frames_do_not_bridge() {
        // 11 links 10 and 12, but it is not among the priors.
        let map = two_component_map();
        let places = cluster_priors(&map, &ids(&[12, 10])).unwrap();
        assert_eq!(places.len(), 2);
        assert_eq!(places[0].keyframe_ids, ids(&[10]));
        assert_eq!(places[1].keyframe_ids, ids(&[12]));
    }

    #[test]
    fn single_prior() {
        let map = two_component_map();
        let places = cluster_priors(&map, &ids(&[21])).unwrap();
        assert_eq!(places.len(), 1);
        assert_eq!(places[0].landmark_ids, vec![LandmarkId(4), LandmarkId(5)]);
    }

    #[test]
    fn errors() {
        let map = two_component_map();
        assert!(cluster_priors(&map, &[]).is_err());
        assert!(matches!(
            cluster_priors(&map, &ids(&[10, 99])),
            Err(Error::UnknownId { .. })
        ));
    }

    #[test]
    fn repeated_ids_counted_once() {
        let map = two_component_map();
        let places = cluster_priors(&map, &ids(&[20, 20, 21])).unwrap();
        assert_eq!(places.len(), 1);
        assert_eq!(places[0].keyframe_ids, ids(&[20, 21]));
    }
}
