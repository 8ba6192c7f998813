//! Sparse visual map: keyframes, landmarks and the observations linking them.
//!
//! A [`VisualMap`] is validated once on construction and immutable afterwards.
//! Its keyframe → landmark reverse index is the frame side of the bipartite
//! covisibility graph.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PinholeCamera, Pose, Vec2, Vec3};

/// Default global descriptor dimension of real maps.
pub const DEFAULT_GLOBAL_DIM: usize = 4096;
/// Default local descriptor dimension (SIFT).
pub const DEFAULT_LOCAL_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeyframeId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkId(pub u64);

pub type CameraId = u32;

impl fmt::Display for KeyframeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for LandmarkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Row-major matrix of `f32` descriptors, one row per keypoint.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DescriptorMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl DescriptorMatrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 && !data.is_empty() || dim > 0 && data.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                context: "descriptor matrix".into(),
                expected: dim,
                actual: data.len(),
            });
        }
        Ok(Self { dim, data })
    }

    pub fn with_dim(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_rows<R: AsRef<[f32]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut m = Self::with_dim(dim);
        for r in rows {
            m.push(r.as_ref())?;
        }
        Ok(m)
    }

    pub fn push(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "descriptor row".into(),
                expected: self.dim,
                actual: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub camera_id: CameraId,
    pub pose: Pose,
    pub global_descriptor: Vec<f32>,
    pub keypoints: Vec<Vec2>,
    pub local_descriptors: DescriptorMatrix,
}

/// A landmark seen at keypoint `keypoint` of keyframe `keyframe`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Observation {
    pub keyframe: KeyframeId,
    pub keypoint: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub id: LandmarkId,
    pub position: Vec3,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualMap {
    cameras: BTreeMap<CameraId, PinholeCamera>,
    global_dim: usize,
    local_dim: usize,
    keyframes: Vec<Keyframe>,
    keyframe_index: HashMap<KeyframeId, usize>,
    landmarks: Vec<Landmark>,
    landmark_index: HashMap<LandmarkId, usize>,
    /// Landmarks observed by each keyframe (same order as `keyframes`), ascending.
    observed: Vec<Vec<LandmarkId>>,
}

impl VisualMap {
    /// Validates all map invariants and builds the reverse index.
    pub fn new(
        cameras: BTreeMap<CameraId, PinholeCamera>,
        global_dim: usize,
        local_dim: usize,
        keyframes: Vec<Keyframe>,
        landmarks: Vec<Landmark>,
    ) -> Result<Self> {
        if global_dim == 0 || local_dim == 0 {
            return Err(Error::schema("map header", "descriptor dimensions must be positive"));
        }
        for (id, cam) in &cameras {
            cam.validate()
                .map_err(|e| Error::schema(format!("camera {id}"), e.to_string()))?;
        }

        let mut keyframe_index = HashMap::with_capacity(keyframes.len());
        for (i, kf) in keyframes.iter().enumerate() {
            let entity = format!("keyframe {}", kf.id);
            if keyframe_index.insert(kf.id, i).is_some() {
                return Err(Error::DuplicateId {
                    context: "keyframes".into(),
                    id: kf.id.0,
                });
            }
            let camera = cameras.get(&kf.camera_id).ok_or_else(|| Error::DanglingReference {
                entity: entity.clone(),
                target: format!("camera {}", kf.camera_id),
            })?;
            if kf.global_descriptor.len() != global_dim {
                return Err(Error::DimensionMismatch {
                    context: format!("{entity} global descriptor"),
                    expected: global_dim,
                    actual: kf.global_descriptor.len(),
                });
            }
            if kf.local_descriptors.dim() != local_dim {
                return Err(Error::DimensionMismatch {
                    context: format!("{entity} local descriptors"),
                    expected: local_dim,
                    actual: kf.local_descriptors.dim(),
                });
            }
            if kf.keypoints.len() != kf.local_descriptors.len() {
                return Err(Error::schema(
                    entity,
                    format!(
                        "{} keypoints but {} local descriptors",
                        kf.keypoints.len(),
                        kf.local_descriptors.len()
                    ),
                ));
            }
            if let Some(k) = kf.keypoints.iter().position(|p| !camera.contains(p)) {
                return Err(Error::schema(
                    entity,
                    format!("keypoint {k} lies outside the image"),
                ));
            }
        }

        let mut landmark_index = HashMap::with_capacity(landmarks.len());
        let mut observed: Vec<Vec<LandmarkId>> = vec![Vec::new(); keyframes.len()];
        let mut used = HashSet::new();
        for (i, lm) in landmarks.iter().enumerate() {
            let entity = format!("landmark {}", lm.id);
            if landmark_index.insert(lm.id, i).is_some() {
                return Err(Error::DuplicateId {
                    context: "landmarks".into(),
                    id: lm.id.0,
                });
            }
            if lm.observations.is_empty() {
                return Err(Error::schema(entity, "landmark has no observations"));
            }
            if lm.position.iter().any(|v| !v.is_finite()) {
                return Err(Error::schema(entity, "position is not finite"));
            }
            for obs in &lm.observations {
                let &k = keyframe_index
                    .get(&obs.keyframe)
                    .ok_or_else(|| Error::DanglingReference {
                        entity: entity.clone(),
                        target: format!("keyframe {}", obs.keyframe),
                    })?;
                if obs.keypoint >= keyframes[k].keypoints.len() {
                    return Err(Error::DanglingReference {
                        entity: entity.clone(),
                        target: format!("keypoint {} of keyframe {}", obs.keypoint, obs.keyframe),
                    });
                }
                if !used.insert(*obs) {
                    return Err(Error::schema(
                        entity,
                        format!(
                            "keypoint {} of keyframe {} already observes another landmark",
                            obs.keypoint, obs.keyframe
                        ),
                    ));
                }
                observed[k].push(lm.id);
            }
        }
        for list in &mut observed {
            list.sort_unstable();
            list.dedup();
        }

        Ok(Self {
            cameras,
            global_dim,
            local_dim,
            keyframes,
            keyframe_index,
            landmarks,
            landmark_index,
            observed,
        })
    }

    pub fn cameras(&self) -> &BTreeMap<CameraId, PinholeCamera> {
        &self.cameras
    }

    pub fn camera(&self, id: CameraId) -> Option<&PinholeCamera> {
        self.cameras.get(&id)
    }

    pub fn global_dim(&self) -> usize {
        self.global_dim
    }

    pub fn local_dim(&self) -> usize {
        self.local_dim
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn landmarks(&self) -> &[Landmark] {
        &self.landmarks
    }

    pub fn num_keyframes(&self) -> usize {
        self.keyframes.len()
    }

    pub fn num_landmarks(&self) -> usize {
        self.landmarks.len()
    }

    pub fn keyframe(&self, id: KeyframeId) -> Option<&Keyframe> {
        self.keyframe_index.get(&id).map(|&i| &self.keyframes[i])
    }

    pub fn landmark(&self, id: LandmarkId) -> Option<&Landmark> {
        self.landmark_index.get(&id).map(|&i| &self.landmarks[i])
    }

    /// Ascending ids of the landmarks observed by one keyframe.
    pub fn observed_landmarks(&self, id: KeyframeId) -> Result<&[LandmarkId]> {
        let &i = self
            .keyframe_index
            .get(&id)
            .ok_or(Error::UnknownId {
                kind: "keyframe",
                id: id.0,
            })?;
        Ok(&self.observed[i])
    }

    /// Union of the landmarks observed by `keyframe_ids`, ascending.
    pub fn landmarks_of_keyframes<'a, I>(&self, keyframe_ids: I) -> Result<Vec<LandmarkId>>
    where
        I: IntoIterator<Item = &'a KeyframeId>,
    {
        let mut out = BTreeSet::new();
        for &id in keyframe_ids {
            out.extend(self.observed_landmarks(id)?.iter().copied());
        }
        Ok(out.into_iter().collect())
    }

    /// Total number of observation edges.
    pub fn num_observations(&self) -> usize {
        self.observed.iter().map(Vec::len).sum()
    }
}
