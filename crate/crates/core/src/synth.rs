//! Deterministic synthetic worlds: a map, query frames and ground truth.
//!
//! Each place is a straight trajectory along world `x`, with places 1 km
//! apart so that no landmark is visible from two places. Cameras look along
//! world `+y` at a slab of landmarks 8-12 m ahead. Every landmark owns a
//! random unit prototype descriptor; every observation stores the prototype
//! plus Gaussian noise, renormalized. Both follow a decaying per-component
//! spectrum, so descriptors have a low intrinsic dimension. Keyframe global
//! descriptors are a per-place prototype plus a smooth function of the
//! position along the trajectory plus noise.
//!
//! An aliased pair `(a, b)` gives place `b` the local and global prototypes
//! of place `a` while keeping its own landmark positions and ids.
//!
//! Random draws come from ChaCha8 with one stream per entity class (see the
//! `STREAM_*` constants), so changing one class does not shift the others.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::format::QuerySet;
use crate::geometry::{PinholeCamera, Pose, Vec2, Vec3};
use crate::map::{DescriptorMatrix, Keyframe, KeyframeId, Landmark, LandmarkId, Observation, VisualMap};
use crate::matching::QueryFrame;

pub const DEFAULT_SYNTH_SEED: u64 = 2024;
/// Distance between the origins of consecutive places, meters.
pub const PLACE_SEPARATION_M: f64 = 1000.0;
/// Landmark slab: distance ahead of the trajectory, meters.
pub const LANDMARK_DEPTH_RANGE: (f64, f64) = (8.0, 12.0);
/// Landmark slab: half height, meters.
pub const LANDMARK_HALF_HEIGHT: f64 = 3.0;
/// Landmark slab: extent beyond the trajectory ends, meters.
pub const LANDMARK_MARGIN: f64 = 6.0;
/// Projections closer than this to the image border are not observed, pixels.
pub const BORDER_PX: f64 = 2.0;
/// Number of harmonics of the smooth global descriptor component.
pub const GLOBAL_HARMONICS: usize = 3;
/// Per-component standard deviation of the smooth component's coefficients.
pub const GLOBAL_SMOOTH_SCALE: f64 = 0.1;

pub const STREAM_LANDMARKS: u64 = 1;
pub const STREAM_LOCAL_PROTOTYPES: u64 = 2;
pub const STREAM_GLOBAL_PROTOTYPES: u64 = 3;
pub const STREAM_KEYFRAMES: u64 = 4;
pub const STREAM_QUERIES: u64 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub rng_seed: u64,
    pub num_places: usize,
    pub keyframes_per_place: usize,
    /// Landmarks sampled per place; those never observed are dropped.
    pub landmarks_per_place: usize,
    pub keyframe_spacing_m: f64,
    pub max_keypoints_per_keyframe: usize,
    pub keypoint_noise_px: f64,
    pub local_descriptor_noise_sigma: f64,
    /// Local prototypes and observation noise draw component `i` with
    /// standard deviation `exp(-i / decay)` (times the noise sigma for the
    /// noise); infinite gives isotropic descriptors.
    pub local_descriptor_spectrum_decay: f64,
    pub global_descriptor_noise_sigma: f64,
    pub aliasing_pairs: Vec<(usize, usize)>,
    pub num_queries: usize,
    pub distractor_keypoints_per_query: usize,
    /// Maximum offset of a query center from its keyframe per axis, meters.
    pub query_offset_m: f64,
    /// Maximum rotation of a query relative to its keyframe, degrees.
    pub query_offset_deg: f64,
    pub local_dim: usize,
    pub global_dim: usize,
    pub camera: PinholeCamera,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rng_seed: DEFAULT_SYNTH_SEED,
            num_places: 10,
            keyframes_per_place: 20,
            landmarks_per_place: 2000,
            keyframe_spacing_m: 1.0,
            max_keypoints_per_keyframe: 300,
            keypoint_noise_px: 1.0,
            local_descriptor_noise_sigma: 0.3,
            local_descriptor_spectrum_decay: 8.0,
            global_descriptor_noise_sigma: 0.02,
            aliasing_pairs: vec![(0, 1), (2, 3)],
            num_queries: 500,
            distractor_keypoints_per_query: 50,
            query_offset_m: 0.5,
            query_offset_deg: 5.0,
            local_dim: 128,
            global_dim: 64,
            camera: PinholeCamera {
                fx: 500.0,
                fy: 500.0,
                cx: 320.0,
                cy: 240.0,
                width: 640.0,
                height: 480.0,
            },
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_places", self.num_places),
            ("keyframes_per_place", self.keyframes_per_place),
            ("landmarks_per_place", self.landmarks_per_place),
            ("max_keypoints_per_keyframe", self.max_keypoints_per_keyframe),
            ("local_dim", self.local_dim),
            ("global_dim", self.global_dim),
        ];
        for (name, v) in positive {
            if v < 1 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        let non_negative = [
            ("keyframe_spacing_m", self.keyframe_spacing_m),
            ("keypoint_noise_px", self.keypoint_noise_px),
            ("local_descriptor_noise_sigma", self.local_descriptor_noise_sigma),
            ("global_descriptor_noise_sigma", self.global_descriptor_noise_sigma),
            ("query_offset_m", self.query_offset_m),
            ("query_offset_deg", self.query_offset_deg),
        ];
        if !(self.local_descriptor_spectrum_decay > 0.0) {
            return Err(Error::invalid("local_descriptor_spectrum_decay", "must be > 0"));
        }
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(name, format!("{v} is not finite and >= 0")));
            }
        }
        self.camera.validate()?;
        let mut used = vec![false; self.num_places];
        for &(a, b) in &self.aliasing_pairs {
            if a >= self.num_places || b >= self.num_places || a == b {
                return Err(Error::invalid(
                    "aliasing_pairs",
                    format!("({a}, {b}) is not a pair of distinct places below {}", self.num_places),
                ));
            }
            for p in [a, b] {
                if std::mem::replace(&mut used[p], true) {
                    return Err(Error::invalid("aliasing_pairs", format!("place {p} appears twice")));
                }
            }
        }
        Ok(())
    }

    /// Place whose descriptor prototypes place `p` uses.
    fn prototype_source(&self, p: usize) -> usize {
        self.aliasing_pairs
            .iter()
            .find(|&&(_, b)| b == p)
            .map_or(p, |&(a, _)| a)
    }

    fn trajectory_length(&self) -> f64 {
        (self.keyframes_per_place.saturating_sub(1) as f64 * self.keyframe_spacing_m).max(1.0)
    }
}

/// Camera orientation looking along world `+y`, image `y` pointing down
/// (world `-z`).
pub fn forward_rotation() -> UnitQuaternion<f64> {
    let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m))
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    random_unit_with_decay(rng, dim, f64::INFINITY)
}

/// Gaussian vector whose component `i` has standard deviation
/// `exp(-i / decay)`.
fn decayed_gaussian(rng: &mut ChaCha8Rng, dim: usize, decay: f64) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let z: f64 = StandardNormal.sample(rng);
            z * (-(i as f64) / decay).exp()
        })
        .collect()
}

/// Normalizes `v`, or returns `None` when it is numerically zero.
fn normalized(v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-12).then(|| v.into_iter().map(|x| x / n).collect())
}

fn random_unit_with_decay(rng: &mut ChaCha8Rng, dim: usize, decay: f64) -> Vec<f64> {
    loop {
        if let Some(v) = normalized(decayed_gaussian(rng, dim, decay)) {
            return v;
        }
    }
}

/// `normalize(proto + σ·noise)` as `f32`, the noise following the same
/// spectrum as the prototypes.
fn noisy_unit(rng: &mut ChaCha8Rng, proto: &[f64], sigma: f64, decay: f64) -> Vec<f32> {
    let noise = decayed_gaussian(rng, proto.len(), decay);
    let v: Vec<f64> = proto.iter().zip(noise).map(|(&p, z)| p + sigma * z).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| (x / n) as f32).collect()
}

/// Place prototype plus smooth harmonics over the trajectory coordinate.
struct GlobalModel {
    prototype: Vec<f64>,
    /// `(cos, sin)` coefficient vectors per harmonic.
    harmonics: Vec<(Vec<f64>, Vec<f64>)>,
}

impl GlobalModel {
    fn sample(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let coef = Normal::new(0.0, GLOBAL_SMOOTH_SCALE).expect("valid normal");
        let vec = |rng: &mut ChaCha8Rng| (0..dim).map(|_| coef.sample(rng)).collect::<Vec<f64>>();
        let prototype = random_unit(rng, dim);
        let harmonics = (0..GLOBAL_HARMONICS).map(|_| (vec(rng), vec(rng))).collect();
        Self { prototype, harmonics }
    }

    fn descriptor(&self, rng: &mut ChaCha8Rng, phase: f64, sigma: f64) -> Vec<f32> {
        let mut v = self.prototype.clone();
        for (m, (c, s)) in self.harmonics.iter().enumerate() {
            let w = std::f64::consts::PI * (m + 1) as f64 * phase;
            let (sw, cw) = w.sin_cos();
            for ((x, a), b) in v.iter_mut().zip(c).zip(s) {
                *x += a * cw + b * sw;
            }
        }
        v.into_iter()
            .map(|x| {
                let z: f64 = StandardNormal.sample(rng);
                (x + sigma * z) as f32
            })
            .collect()
    }
}

struct Observed {
    keypoints: Vec<Vec2>,
    descriptors: DescriptorMatrix,
    landmarks: Vec<usize>,
}

/// Observes up to `max` randomly chosen visible landmarks of one place.
fn observe(
    rng: &mut ChaCha8Rng,
    config: &SynthConfig,
    pose: &Pose,
    positions: &[Vec3],
    prototypes: &[Vec<f64>],
    max: usize,
) -> Observed {
    let cam = &config.camera;
    let visible: Vec<(usize, Vec2)> = positions
        .iter()
        .enumerate()
        .filter_map(|(j, x)| {
            let u = cam.project(pose, x)?;
            let inside = u.x >= BORDER_PX
                && u.y >= BORDER_PX
                && u.x <= cam.width - BORDER_PX
                && u.y <= cam.height - BORDER_PX;
            inside.then_some((j, u))
        })
        .collect();
    let chosen = index::sample(rng, visible.len(), max.min(visible.len())).into_vec();
    let mut out = Observed {
        keypoints: Vec::with_capacity(chosen.len()),
        descriptors: DescriptorMatrix::with_dim(config.local_dim),
        landmarks: Vec::with_capacity(chosen.len()),
    };
    for i in chosen {
        let (j, u) = visible[i];
        let dx: f64 = StandardNormal.sample(rng);
        let dy: f64 = StandardNormal.sample(rng);
        let noisy = Vec2::new(
            (u.x + config.keypoint_noise_px * dx).clamp(0.0, cam.width),
            (u.y + config.keypoint_noise_px * dy).clamp(0.0, cam.height),
        );
        let d = noisy_unit(
            rng,
            &prototypes[j],
            config.local_descriptor_noise_sigma,
            config.local_descriptor_spectrum_decay,
        );
        out.descriptors.push(&d).expect("dimension fixed by config");
        out.keypoints.push(noisy);
        out.landmarks.push(j);
    }
    out
}

/// Ground truth of a generated world, beyond what the map and queries carry.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldTruth {
    /// Place of every keyframe.
    pub keyframe_place: BTreeMap<KeyframeId, usize>,
    /// Place of every landmark.
    pub landmark_place: BTreeMap<LandmarkId, usize>,
}

/// Generates a map and its queries.
pub fn generate_world(config: &SynthConfig) -> Result<(VisualMap, QuerySet)> {
    generate_world_with_truth(config).map(|(m, q, _)| (m, q))
}

/// [`generate_world`] plus place labels of keyframes and landmarks.
pub fn generate_world_with_truth(config: &SynthConfig) -> Result<(VisualMap, QuerySet, WorldTruth)> {
    config.validate()?;
    let seed = config.rng_seed;
    let np = config.num_places;
    let nl = config.landmarks_per_place;
    let nk = config.keyframes_per_place;
    let length = config.trajectory_length();
    let rotation = forward_rotation();

    let mut rng = stream(seed, STREAM_LANDMARKS);
    let positions: Vec<Vec<Vec3>> = (0..np)
        .map(|p| {
            let x0 = p as f64 * PLACE_SEPARATION_M;
            (0..nl)
                .map(|_| {
                    let span = (nk - 1) as f64 * config.keyframe_spacing_m;
                    Vec3::new(
                        x0 + rng.random_range(-LANDMARK_MARGIN..=span + LANDMARK_MARGIN),
                        rng.random_range(LANDMARK_DEPTH_RANGE.0..=LANDMARK_DEPTH_RANGE.1),
                        rng.random_range(-LANDMARK_HALF_HEIGHT..=LANDMARK_HALF_HEIGHT),
                    )
                })
                .collect()
        })
        .collect();

    let mut rng = stream(seed, STREAM_LOCAL_PROTOTYPES);
    let own_local: Vec<Vec<Vec<f64>>> = (0..np)
        .map(|_| {
            (0..nl)
                .map(|_| random_unit_with_decay(&mut rng, config.local_dim, config.local_descriptor_spectrum_decay))
                .collect()
        })
        .collect();
    let mut rng = stream(seed, STREAM_GLOBAL_PROTOTYPES);
    let own_global: Vec<GlobalModel> = (0..np).map(|_| GlobalModel::sample(&mut rng, config.global_dim)).collect();
    let local_proto = |p: usize| &own_local[config.prototype_source(p)];
    let global_model = |p: usize| &own_global[config.prototype_source(p)];

    let mut rng = stream(seed, STREAM_KEYFRAMES);
    let mut keyframes = Vec::with_capacity(np * nk);
    let mut observations: Vec<Vec<Vec<Observation>>> = vec![vec![Vec::new(); nl]; np];
    let mut keyframe_place = BTreeMap::new();
    for p in 0..np {
        for k in 0..nk {
            let id = KeyframeId((p * nk + k) as u64);
            let along = k as f64 * config.keyframe_spacing_m;
            let center = Vec3::new(p as f64 * PLACE_SEPARATION_M + along, 0.0, 0.0);
            let pose = Pose::from_center(rotation, center);
            let obs = observe(
                &mut rng,
                config,
                &pose,
                &positions[p],
                local_proto(p),
                config.max_keypoints_per_keyframe,
            );
            for (kp, &j) in obs.landmarks.iter().enumerate() {
                observations[p][j].push(Observation { keyframe: id, keypoint: kp });
            }
            let global = global_model(p).descriptor(&mut rng, along / length, config.global_descriptor_noise_sigma);
            keyframes.push(Keyframe {
                id,
                camera_id: 0,
                pose,
                global_descriptor: global,
                keypoints: obs.keypoints,
                local_descriptors: obs.descriptors,
            });
            keyframe_place.insert(id, p);
        }
    }

    let mut landmarks = Vec::new();
    let mut landmark_place = BTreeMap::new();
    for (p, per_place) in observations.into_iter().enumerate() {
        for (j, obs) in per_place.into_iter().enumerate() {
            if obs.is_empty() {
                continue;
            }
            let id = LandmarkId((p * nl + j) as u64);
            landmarks.push(Landmark {
                id,
                position: positions[p][j],
                observations: obs,
            });
            landmark_place.insert(id, p);
        }
    }
    let cameras = BTreeMap::from([(0, config.camera)]);
    let map = VisualMap::new(cameras.clone(), config.global_dim, config.local_dim, keyframes, landmarks)?;

    let mut rng = stream(seed, STREAM_QUERIES);
    let mut queries = Vec::with_capacity(config.num_queries);
    for qi in 0..config.num_queries {
        let p = rng.random_range(0..np);
        let k = rng.random_range(0..nk);
        let m = config.query_offset_m;
        let offset = if m > 0.0 {
            Vec3::new(rng.random_range(-m..=m), rng.random_range(-m..=m), rng.random_range(-m..=m))
        } else {
            Vec3::zeros()
        };
        let a = random_unit(&mut rng, 3);
        let axis = Vec3::new(a[0], a[1], a[2]);
        let angle = if config.query_offset_deg > 0.0 {
            rng.random_range(0.0..=config.query_offset_deg).to_radians()
        } else {
            0.0
        };
        let along = k as f64 * config.keyframe_spacing_m + offset.x;
        let center = Vec3::new(p as f64 * PLACE_SEPARATION_M + along, offset.y, offset.z);
        let rot = UnitQuaternion::from_scaled_axis(axis * angle) * rotation;
        let pose = Pose::from_center(rot, center);

        let obs = observe(
            &mut rng,
            config,
            &pose,
            &positions[p],
            local_proto(p),
            config.max_keypoints_per_keyframe,
        );
        let mut keypoints = obs.keypoints;
        let mut rows: Vec<Vec<f32>> = obs.descriptors.rows().map(<[f32]>::to_vec).collect();
        for _ in 0..config.distractor_keypoints_per_query {
            keypoints.push(Vec2::new(
                rng.random_range(0.0..=config.camera.width),
                rng.random_range(0.0..=config.camera.height),
            ));
            rows.push(random_unit(&mut rng, config.local_dim).into_iter().map(|x| x as f32).collect());
        }
        let mut order: Vec<usize> = (0..keypoints.len()).collect();
        order.shuffle(&mut rng);
        let keypoints: Vec<Vec2> = order.iter().map(|&i| keypoints[i]).collect();
        let rows: Vec<&[f32]> = order.iter().map(|&i| rows[i].as_slice()).collect();
        let global = global_model(p).descriptor(&mut rng, along / length, config.global_descriptor_noise_sigma);
        queries.push(QueryFrame {
            id: qi as u64,
            camera_id: 0,
            camera: config.camera,
            keypoints,
            local_descriptors: DescriptorMatrix::from_rows(config.local_dim, &rows)?,
            global_descriptor: global,
            ground_truth: Some(pose),
            true_place: Some(p as u32),
        });
    }

    let query_set = QuerySet {
        cameras,
        global_dim: config.global_dim,
        local_dim: config.local_dim,
        queries,
    };
    Ok((
        map,
        query_set,
        WorldTruth {
            keyframe_place,
            landmark_place,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covisibility::cluster_priors;
    use crate::global_index::GlobalIndex;

    fn small() -> SynthConfig {
        SynthConfig {
            num_places: 3,
            keyframes_per_place: 6,
            landmarks_per_place: 400,
            max_keypoints_per_keyframe: 80,
            num_queries: 10,
            distractor_keypoints_per_query: 5,
            aliasing_pairs: vec![],
            local_dim: 16,
            global_dim: 12,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn forward_rotation_looks_along_y() {
        let pose = Pose::from_center(forward_rotation(), Vec3::zeros());
        let p = pose.transform(&Vec3::new(0.0, 10.0, 0.0));
        assert!((p - Vec3::new(0.0, 0.0, 10.0)).norm() < 1e-12);
        let up = pose.transform(&Vec3::new(0.0, 10.0, 1.0));
        assert!(up.y < 0.0);
    }

    #[test]
    fn noiseless_keypoints_are_exact_projections() {
        let config = SynthConfig {
            keypoint_noise_px: 0.0,
            local_descriptor_noise_sigma: 0.0,
            global_descriptor_noise_sigma: 0.0,
            ..small()
        };
        let (map, _) = generate_world(&config).unwrap();
        for lm in map.landmarks() {
            for o in &lm.observations {
                let kf = map.keyframe(o.keyframe).unwrap();
                let u = config.camera.project(&kf.pose, &lm.position).unwrap();
                assert_eq!(kf.keypoints[o.keypoint], u);
            }
        }
    }

    #[test]
    fn two_keyframes_share_landmarks() {
        let config = SynthConfig {
            num_places: 1,
            keyframes_per_place: 2,
            keypoint_noise_px: 0.0,
            local_descriptor_noise_sigma: 0.0,
            global_descriptor_noise_sigma: 0.0,
            ..small()
        };
        let (map, _) = generate_world(&config).unwrap();
        let places = cluster_priors(&map, &[KeyframeId(0), KeyframeId(1)]).unwrap();
        assert_eq!(places.len(), 1);
    }

    #[test]
    fn places_share_no_landmarks() {
        let (map, _, truth) = generate_world_with_truth(&small()).unwrap();
        for lm in map.landmarks() {
            let p = truth.landmark_place[&lm.id];
            assert!(lm.observations.iter().all(|o| truth.keyframe_place[&o.keyframe] == p));
        }
    }

    #[test]
    fn aliased_places_are_retrieved_together() {
        let config = SynthConfig {
            aliasing_pairs: vec![(0, 1)],
            global_descriptor_noise_sigma: 0.0,
            local_descriptor_noise_sigma: 0.0,
            ..small()
        };
        let (map, queries, truth) = generate_world_with_truth(&config).unwrap();
        let index = GlobalIndex::build(&map, 8).unwrap();
        for q in queries.queries.iter().filter(|q| q.true_place == Some(0)) {
            let priors = index.retrieve_priors(&q.global_descriptor, 4).unwrap();
            let places: Vec<usize> = priors.iter().map(|k| truth.keyframe_place[k]).collect();
            assert!(places.contains(&0) && places.contains(&1), "{places:?}");
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_world(&small()).unwrap();
        let b = generate_world(&small()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_configs() {
        for bad in [
            SynthConfig { num_places: 0, ..small() },
            SynthConfig { aliasing_pairs: vec![(0, 0)], ..small() },
            SynthConfig { aliasing_pairs: vec![(0, 1), (1, 2)], ..small() },
            SynthConfig { aliasing_pairs: vec![(0, 5)], ..small() },
            SynthConfig { keypoint_noise_px: -1.0, ..small() },
        ] {
            assert!(generate_world(&bad).is_err());
        }
    }
}
