//! 2D-3D matching of query keypoints against map landmarks.
//!
//! A [`LandmarkMatcher`] indexes every observation descriptor of a landmark
//! set, labelled by landmark. Each query keypoint takes its nearest
//! observation; the ratio test compares it with the nearest observation of a
//! *different* landmark. Surviving matches are reduced to one keypoint per
//! landmark, keeping the smallest distance.

use std::collections::HashMap;

use crate::ann::KdTree;
use crate::covisibility::Place;
use crate::error::{Error, Result};
use crate::geometry::{PinholeCamera, Pose, Vec2};
use crate::map::{CameraId, DescriptorMatrix, KeyframeId, LandmarkId, VisualMap};

/// Default approximation factor of the local matching search.
pub const DEFAULT_MATCH_EPSILON: f64 = 3.0;
/// Default nearest / second-nearest distance ratio.
pub const DEFAULT_RATIO_THRESHOLD: f64 = 0.8;

/// A query image with precomputed features.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryFrame {
    pub id: u64,
    pub camera_id: CameraId,
    pub camera: PinholeCamera,
    pub keypoints: Vec<Vec2>,
    pub local_descriptors: DescriptorMatrix,
    pub global_descriptor: Vec<f32>,
    /// Evaluation only.
    pub ground_truth: Option<Pose>,
    /// Evaluation only: index of the synthetic place the query was taken in.
    pub true_place: Option<u32>,
}

impl QueryFrame {
    /// Checks descriptor dimensions, keypoint/descriptor counts and that all
    /// keypoints lie inside the image.
    pub fn validate(&self, global_dim: usize, local_dim: usize) -> Result<()> {
        let entity = || format!("query {}", self.id);
        self.camera
            .validate()
            .map_err(|e| Error::schema(entity(), e.to_string()))?;
        if self.global_descriptor.len() != global_dim {
            return Err(Error::DimensionMismatch {
                context: format!("{} global descriptor", entity()),
                expected: global_dim,
                actual: self.global_descriptor.len(),
            });
        }
        if self.local_descriptors.dim() != local_dim {
            return Err(Error::DimensionMismatch {
                context: format!("{} local descriptors", entity()),
                expected: local_dim,
                actual: self.local_descriptors.dim(),
            });
        }
        if self.keypoints.len() != self.local_descriptors.len() {
            return Err(Error::schema(
                entity(),
                format!(
                    "{} keypoints but {} local descriptors",
                    self.keypoints.len(),
                    self.local_descriptors.len()
                ),
            ));
        }
        if let Some(i) = self.keypoints.iter().position(|p| !self.camera.contains(p)) {
            return Err(Error::schema(
                entity(),
                format!("keypoint {i} at {:?} lies outside the image", self.keypoints[i]),
            ));
        }
        Ok(())
    }

    /// A query carrying a keyframe's own features, with the keyframe pose as
    /// ground truth.
    pub fn from_keyframe(map: &VisualMap, keyframe: KeyframeId, id: u64) -> Result<Self> {
        let kf = map.keyframe(keyframe).ok_or(Error::UnknownId {
            kind: "keyframe",
            id: keyframe.0,
        })?;
        let camera = *map.camera(kf.camera_id).ok_or_else(|| Error::DanglingReference {
            entity: format!("keyframe {}", kf.id),
            target: format!("camera {}", kf.camera_id),
        })?;
        Ok(Self {
            id,
            camera_id: kf.camera_id,
            camera,
            keypoints: kf.keypoints.clone(),
            local_descriptors: kf.local_descriptors.clone(),
            global_descriptor: kf.global_descriptor.clone(),
            ground_truth: Some(kf.pose),
            true_place: None,
        })
    }
}

/// A query keypoint matched to a landmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match2D3D {
    pub keypoint_index: usize,
    pub landmark_id: LandmarkId,
    /// Squared Euclidean descriptor distance.
    pub descriptor_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    /// Approximation factor of the k-d tree search.
    pub epsilon: f64,
    /// Ratio on (unsquared) descriptor distances; 1.0 disables the test.
    pub ratio_threshold: f64,
    /// Upper bound on the squared descriptor distance; infinite disables it.
    pub max_descriptor_distance: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_MATCH_EPSILON,
            ratio_threshold: DEFAULT_RATIO_THRESHOLD,
            max_descriptor_distance: f64::INFINITY,
        }
    }
}

impl MatchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid("epsilon", format!("{} is not finite and >= 0", self.epsilon)));
        }
        if !(self.ratio_threshold > 0.0 && self.ratio_threshold <= 1.0) {
            return Err(Error::invalid(
                "ratio_threshold",
                format!("{} not in (0, 1]", self.ratio_threshold),
            ));
        }
        if !(self.max_descriptor_distance >= 0.0) {
            return Err(Error::invalid(
                "max_descriptor_distance",
                format!("{} is negative or NaN", self.max_descriptor_distance),
            ));
        }
        Ok(())
    }

    /// Whether a nearest distance `d1` passes against a second distance `d2`
    /// (both squared; `None` when no other landmark exists).
    pub fn accepts(&self, d1: f64, d2: Option<f64>) -> bool {
        if d1 > self.max_descriptor_distance {
            return false;
        }
        match d2 {
            Some(d2) if self.ratio_threshold < 1.0 => {
                d1 < self.ratio_threshold * self.ratio_threshold * d2
            }
            _ => true,
        }
    }
}

/// Observation descriptors of a landmark set in a k-d tree.
#[derive(Debug, Clone)]
pub struct LandmarkMatcher {
    tree: KdTree,
    /// Landmark of each tree entry, indexed by payload id.
    labels: Vec<LandmarkId>,
    num_landmarks: usize,
}

impl LandmarkMatcher {
    /// Indexes every observation of `landmark_ids`.
    pub fn new(map: &VisualMap, landmark_ids: &[LandmarkId]) -> Result<Self> {
        let dim = map.local_dim();
        let mut labels = Vec::new();
        let mut data = Vec::new();
        for &id in landmark_ids {
            let lm = map.landmark(id).ok_or(Error::UnknownId {
                kind: "landmark",
                id: id.0,
            })?;
            for obs in &lm.observations {
                let kf = map.keyframe(obs.keyframe).ok_or(Error::UnknownId {
                    kind: "keyframe",
                    id: obs.keyframe.0,
                })?;
                data.extend(kf.local_descriptors.row(obs.keypoint).iter().map(|&v| v as f64));
                labels.push(id);
            }
        }
        let tree = KdTree::from_flat(dim, (0..labels.len() as u64).collect(), data)?;
        Ok(Self {
            tree,
            labels,
            num_landmarks: landmark_ids.len(),
        })
    }

    /// Indexes all landmarks of the map.
    pub fn whole_map(map: &VisualMap) -> Result<Self> {
        let ids: Vec<LandmarkId> = map.landmarks().iter().map(|l| l.id).collect();
        Self::new(map, &ids)
    }

    pub fn num_entries(&self) -> usize {
        self.labels.len()
    }

    pub fn num_landmarks(&self) -> usize {
        self.num_landmarks
    }

    /// Nearest entry and the nearest entry of another landmark, as
    /// `(landmark, squared distance)` pairs.
    fn two_nearest(
        &self,
        descriptor: &[f64],
        epsilon: f64,
    ) -> Result<Option<((LandmarkId, f64), Option<f64>)>> {
        let mut k = 2;
        loop {
            let hits = self.tree.knn(descriptor, k, epsilon)?;
            let Some(first) = hits.first() else {
                return Ok(None);
            };
            let best = self.labels[first.id as usize];
            if let Some(second) = hits.iter().find(|h| self.labels[h.id as usize] != best) {
                return Ok(Some(((best, first.sq_dist), Some(second.sq_dist))));
            }
            if hits.len() < k || k >= self.tree.len() {
                return Ok(Some(((best, first.sq_dist), None)));
            }
            k *= 4;
        }
    }

    /// Matches every query keypoint and deduplicates per landmark. Output is
    /// ascending by keypoint index.
    pub fn match_query(&self, query: &QueryFrame, params: &MatchParams) -> Result<Vec<Match2D3D>> {
        params.validate()?;
        if query.local_descriptors.dim() != self.tree.dimension() {
            return Err(Error::DimensionMismatch {
                context: format!("query {} local descriptors", query.id),
                expected: self.tree.dimension(),
                actual: query.local_descriptors.dim(),
            });
        }
        let mut best: HashMap<LandmarkId, Match2D3D> = HashMap::new();
        let mut buf = vec![0.0; self.tree.dimension()];
        for (i, row) in query.local_descriptors.rows().enumerate() {
            for (b, &v) in buf.iter_mut().zip(row) {
                *b = v as f64;
            }
            let Some(((landmark, d1), d2)) = self.two_nearest(&buf, params.epsilon)? else {
                continue;
            };
            if !params.accepts(d1, d2) {
                continue;
            }
            let candidate = Match2D3D {
                keypoint_index: i,
                landmark_id: landmark,
                descriptor_distance: d1,
            };
            // Keypoints arrive in ascending order, so keeping the incumbent on
            // equal distance keeps the lower keypoint index.
            best.entry(landmark)
                .and_modify(|m| {
                    if d1 < m.descriptor_distance {
                        *m = candidate;
                    }
                })
                .or_insert(candidate);
        }
        let mut out: Vec<Match2D3D> = best.into_values().collect();
        out.sort_by_key(|m| m.keypoint_index);
        Ok(out)
    }
}

/// Matches a query against the landmarks of one place.
pub fn match_place(
    map: &VisualMap,
    place: &Place,
    query: &QueryFrame,
    params: &MatchParams,
) -> Result<Vec<Match2D3D>> {
    LandmarkMatcher::new(map, &place.landmark_ids)?.match_query(query, params)
}

/// Matches a query against every landmark of the map.
pub fn match_all(map: &VisualMap, query: &QueryFrame, params: &MatchParams) -> Result<Vec<Match2D3D>> {
    LandmarkMatcher::whole_map(map)?.match_query(query, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::tests::{camera, keyframe, landmark};
    use crate::map::{Keyframe, Landmark, Observation};
    use crate::geometry::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn query_with(descriptors: &[[f32; 2]]) -> QueryFrame {
        QueryFrame {
            id: 0,
            camera_id: 0,
            camera: camera()[&0],
            keypoints: (0..descriptors.len()).map(|i| Vec2::new(i as f64, 1.0)).collect(),
            local_descriptors: DescriptorMatrix::from_rows(2, descriptors).unwrap(),
            global_descriptor: vec![0.0, 1.0],
            ground_truth: None,
            true_place: None,
        }
    }

    fn place_of(map: &VisualMap) -> Place {
        Place {
            rank: 0,
            keyframe_ids: map.keyframes().iter().map(|k| k.id).collect(),
            landmark_ids: map.landmarks().iter().map(|l| l.id).collect(),
        }
    }

    fn no_ratio() -> MatchParams {
        MatchParams {
            epsilon: 0.0,
            ratio_threshold: 1.0,
            ..MatchParams::default()
        }
    }

    #[test]
    fn exact_descriptor_single_landmark() {
        // keyframe(0, 2) stores descriptors [0,1] and [2,3].
        let map = VisualMap::new(camera(), 2, 2, vec![keyframe(0, 2)], vec![landmark(5, &[(0, 1)])])
            .unwrap();
        let q = query_with(&[[2.0, 3.0]]);
        let m = match_place(&map, &place_of(&map), &q, &no_ratio()).unwrap();
        assert_eq!(
            m,
            vec![Match2D3D {
                keypoint_index: 0,
                landmark_id: LandmarkId(5),
                descriptor_distance: 0.0
            }]
        );
        assert_eq!(match_all(&map, &q, &no_ratio()).unwrap(), m);
    }

    #[test]
    fn dedup_keeps_closest_keypoint() {
        let map = VisualMap::new(camera(), 2, 2, vec![keyframe(0, 1)], vec![landmark(5, &[(0, 0)])])
            .unwrap();
        // Landmark descriptor is [0, 1]; squared distances 0.09 and 0.01.
        let q = query_with(&[[0.3, 1.0], [0.1, 1.0]]);
        let m = match_place(&map, &place_of(&map), &q, &no_ratio()).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].keypoint_index, 1);
    }

    #[test]
    fn second_neighbor_must_be_another_landmark() {
        // Two observations of landmark 1 lie close together; landmark 2 is far.
        let mut kf = keyframe(0, 3);
        kf.local_descriptors =
            DescriptorMatrix::from_rows(2, &[[0.0f32, 0.0], [0.0, 0.1], [10.0, 0.0]]).unwrap();
        let map = VisualMap::new(
            camera(),
            2,
            2,
            vec![kf],
            vec![landmark(1, &[(0, 0), (0, 1)]), landmark(2, &[(0, 2)])],
        )
        .unwrap();
        let q = query_with(&[[0.0, 0.05]]);
        let params = MatchParams {
            epsilon: 0.0,
            ..MatchParams::default()
        };
        let m = match_all(&map, &q, &params).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].landmark_id, LandmarkId(1));
    }

    #[test]
    fn ratio_and_distance_gates() {
        let p = MatchParams::default();
        assert!(p.accepts(0.5, Some(1.0)));
        assert!(!p.accepts(0.7, Some(1.0)));
        assert!(p.accepts(0.7, None));
        let p = MatchParams {
            ratio_threshold: 1.0,
            max_descriptor_distance: 0.25,
            ..MatchParams::default()
        };
        assert!(p.accepts(0.25, Some(0.25)));
        assert!(!p.accepts(0.26, None));
        assert!(MatchParams { ratio_threshold: 0.0, ..p }.validate().is_err());
        assert!(MatchParams { epsilon: -1.0, ..p }.validate().is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let map = VisualMap::new(camera(), 2, 2, vec![keyframe(0, 1)], vec![landmark(5, &[(0, 0)])])
            .unwrap();
        let mut q = query_with(&[[0.0, 1.0]]);
        q.local_descriptors = DescriptorMatrix::from_rows(3, &[[0.0f32, 1.0, 2.0]]).unwrap();
        assert!(matches!(
            match_all(&map, &q, &MatchParams::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn query_validation() {
        let mut q = query_with(&[[0.0, 1.0]]);
        assert!(q.validate(2, 2).is_ok());
        assert!(q.validate(3, 2).is_err());
        assert!(q.validate(2, 3).is_err());
        q.keypoints[0] = Vec2::new(-1.0, 5.0);
        assert!(q.validate(2, 2).is_err());
        q.keypoints.clear();
        assert!(q.validate(2, 2).is_err());
    }

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| (x / n) as f32).collect()
    }

    fn perturbed(rng: &mut ChaCha8Rng, proto: &[f32], sigma: f64) -> Vec<f32> {
        let v: Vec<f64> = proto
            .iter()
            .map(|&p| {
                let z: f64 = StandardNormal.sample(rng);
                p as f64 + sigma * z
            })
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| (x / n) as f32).collect()
    }

    /// Brute-force matcher applying the same acceptance and dedup rules.
    fn oracle(map: &VisualMap, landmarks: &[LandmarkId], q: &QueryFrame, p: &MatchParams) -> Vec<Match2D3D> {
        let mut entries: Vec<(LandmarkId, Vec<f64>)> = Vec::new();
        for &id in landmarks {
            for o in &map.landmark(id).unwrap().observations {
                let row = map.keyframe(o.keyframe).unwrap().local_descriptors.row(o.keypoint);
                entries.push((id, row.iter().map(|&v| v as f64).collect()));
            }
        }
        let mut out: Vec<Match2D3D> = Vec::new();
        for (i, row) in q.local_descriptors.rows().enumerate() {
            let x: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let mut dists: Vec<(f64, usize)> = entries
                .iter()
                .enumerate()
                .map(|(e, (_, v))| {
                    let mut acc = 0.0;
                    for (a, b) in x.iter().zip(v) {
                        acc += (a - b) * (a - b);
                    }
                    (acc, e)
                })
                .collect();
            dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let (d1, e1) = dists[0];
            let lm = entries[e1].0;
            let d2 = dists.iter().find(|(_, e)| entries[*e].0 != lm).map(|d| d.0);
            if !p.accepts(d1, d2) {
                continue;
            }
            match out.iter_mut().find(|m| m.landmark_id == lm) {
                Some(m) if d1 < m.descriptor_distance => {
                    *m = Match2D3D {
                        keypoint_index: i,
                        landmark_id: lm,
                        descriptor_distance: d1,
                    }
                }
                Some(_) => {}
                None => out.push(Match2D3D {
                    keypoint_index: i,
                    landmark_id: lm,
                    descriptor_distance: d1,
                }),
            }
        }
        out.sort_by_key(|m| m.keypoint_index);
        out
    }

    /// A single place of `n` landmarks seen twice each, with noisy unit
    /// descriptors, and a query re-observing half of them plus distractors.
    fn noisy_place(seed: u64, n: usize, sigma: f64) -> (VisualMap, QueryFrame) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 32;
        let protos: Vec<Vec<f32>> = (0..n).map(|_| unit(&mut rng, d)).collect();
        let keyframes: Vec<Keyframe> = (0..2)
            .map(|k| Keyframe {
                id: KeyframeId(k),
                camera_id: 0,
                pose: Pose::identity(),
                global_descriptor: vec![k as f32, 1.0],
                keypoints: (0..n).map(|i| Vec2::new((i % 100) as f64, 1.0)).collect(),
                local_descriptors: DescriptorMatrix::from_rows(
                    d,
                    &protos.iter().map(|p| perturbed(&mut rng, p, sigma)).collect::<Vec<_>>(),
                )
                .unwrap(),
            })
            .collect();
        let landmarks: Vec<Landmark> = (0..n)
            .map(|i| Landmark {
                id: LandmarkId(1000 + i as u64),
                position: Vec3::new(0.0, 0.0, 5.0),
                observations: (0..2)
                    .map(|k| Observation {
                        keyframe: KeyframeId(k),
                        keypoint: i,
                    })
                    .collect(),
            })
            .collect();
        let map = VisualMap::new(camera(), 2, d, keyframes, landmarks).unwrap();
        let mut rows: Vec<Vec<f32>> = (0..n / 2)
            .map(|_| {
                let i = rng.random_range(0..n);
                perturbed(&mut rng, &protos[i], sigma)
            })
            .collect();
        rows.extend((0..20).map(|_| unit(&mut rng, d)));
        let query = QueryFrame {
            id: 1,
            camera_id: 0,
            camera: camera()[&0],
            keypoints: (0..rows.len()).map(|i| Vec2::new((i % 100) as f64, 2.0)).collect(),
            local_descriptors: DescriptorMatrix::from_rows(d, &rows).unwrap(),
            global_descriptor: vec![0.0, 1.0],
            ground_truth: None,
            true_place: None,
        };
        (map, query)
    }

    #[test]
    fn exact_search_equals_brute_force_oracle() {
        for seed in 0..5 {
            let (map, q) = noisy_place(seed, 200, 0.05);
            let place = place_of(&map);
            for ratio in [0.8, 1.0] {
                let p = MatchParams {
                    epsilon: 0.0,
                    ratio_threshold: ratio,
                    ..MatchParams::default()
                };
                let got = match_place(&map, &place, &q, &p).unwrap();
                assert_eq!(got, oracle(&map, &place.landmark_ids, &q, &p));
                if ratio == 0.8 {
                    assert!(got.len() > 50, "only {} matches", got.len());
                }
            }
        }
    }

    #[test]
    fn output_invariants_with_approximate_search() {
        let (map, q) = noisy_place(9, 300, 0.1);
        let m = match_all(&map, &q, &MatchParams::default()).unwrap();
        let mut kps: Vec<usize> = m.iter().map(|m| m.keypoint_index).collect();
        assert!(kps.windows(2).all(|w| w[0] < w[1]));
        let mut lms: Vec<LandmarkId> = m.iter().map(|m| m.landmark_id).collect();
        lms.sort();
        lms.dedup();
        kps.dedup();
        assert_eq!(lms.len(), m.len());
    }

    #[test]
    fn restricting_landmarks_matches_subset_oracle() {
        let (map, q) = noisy_place(3, 120, 0.05);
        let subset: Vec<LandmarkId> = map.landmarks().iter().step_by(3).map(|l| l.id).collect();
        let p = MatchParams {
            epsilon: 0.0,
            ..MatchParams::default()
        };
        let got = LandmarkMatcher::new(&map, &subset).unwrap().match_query(&q, &p).unwrap();
        assert_eq!(got, oracle(&map, &subset, &q, &p));
        assert!(got.iter().all(|m| subset.contains(&m.landmark_id)));
    }
}
