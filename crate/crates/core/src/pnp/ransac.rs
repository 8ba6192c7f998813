use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::p3p::solve_p3p;
use super::refine::{refine_pose, reprojection_error};
use crate::error::{Error, Result};
use crate::geometry::{PinholeCamera, Pose, Vec2, Vec3};
use crate::map::VisualMap;
use crate::matching::{Match2D3D, QueryFrame};

pub const DEFAULT_REPROJECTION_THRESHOLD_PX: f64 = 3.0;
pub const DEFAULT_CONFIDENCE: f64 = 0.99;
pub const DEFAULT_MAX_ITERATIONS: usize = 1000;
pub const DEFAULT_MIN_INLIERS: usize = 12;
pub const DEFAULT_RANSAC_SEED: u64 = 0x5eed;

/// Matches drawn per hypothesis: three for the solver, one to pick among
/// its solutions.
pub const SAMPLE_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub reprojection_threshold_px: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub min_inliers: usize,
    pub rng_seed: u64,
    /// Run the final least-squares refinement over the inliers.
    pub refine: bool,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            reprojection_threshold_px: DEFAULT_REPROJECTION_THRESHOLD_PX,
            confidence: DEFAULT_CONFIDENCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            min_inliers: DEFAULT_MIN_INLIERS,
            rng_seed: DEFAULT_RANSAC_SEED,
            refine: true,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.reprojection_threshold_px > 0.0) || !self.reprojection_threshold_px.is_finite() {
            return Err(Error::invalid("reprojection_threshold_px", "must be finite and > 0"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::invalid("confidence", format!("{} not in (0, 1)", self.confidence)));
        }
        if self.max_iterations < 1 {
            return Err(Error::invalid("max_iterations", "must be at least 1"));
        }
        if self.min_inliers < SAMPLE_SIZE {
            return Err(Error::invalid("min_inliers", format!("must be at least {SAMPLE_SIZE}")));
        }
        Ok(())
    }

    /// Iterations needed to draw an all-inlier sample with the configured
    /// confidence at inlier ratio `w`.
    pub fn required_iterations(&self, w: f64) -> usize {
        let p_good = w.powi(SAMPLE_SIZE as i32);
        if p_good >= 1.0 {
            return 1;
        }
        if p_good <= 0.0 {
            return self.max_iterations;
        }
        let n = ((1.0 - self.confidence).ln() / (1.0 - p_good).ln()).ceil();
        if n.is_finite() {
            (n.max(1.0) as usize).min(self.max_iterations)
        } else {
            self.max_iterations
        }
    }
}

/// Result of a successful estimation over index-aligned correspondences.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedEstimate {
    pub pose: Pose,
    /// Ascending indices into the input.
    pub inliers: Vec<usize>,
    pub num_iterations_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoPoseReason {
    InsufficientMatches,
    InsufficientInliers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub inlier_matches: Vec<Match2D3D>,
    pub num_iterations_used: usize,
}

/// Outcome of robust estimation; failing to find a pose is not an error.
#[derive(Debug, Clone, PartialEq)]
pub enum RansacOutcome<T> {
    Pose(T),
    NoPose {
        reason: NoPoseReason,
        /// Largest inlier count seen (after refinement, if any).
        best_inliers: usize,
        num_iterations_used: usize,
    },
}

impl<T> RansacOutcome<T> {
    pub fn pose(&self) -> Option<&T> {
        match self {
            RansacOutcome::Pose(p) => Some(p),
            RansacOutcome::NoPose { .. } => None,
        }
    }
}

struct Consensus {
    inliers: Vec<usize>,
    error_sum: f64,
}

fn consensus(camera: &PinholeCamera, pose: &Pose, points: &[Vec3], pixels: &[Vec2], threshold: f64) -> Consensus {
    let mut inliers = Vec::new();
    let mut error_sum = 0.0;
    for (i, (x, u)) in points.iter().zip(pixels).enumerate() {
        let e = reprojection_error(camera, pose, x, u);
        if e <= threshold {
            inliers.push(i);
            error_sum += e;
        }
    }
    Consensus { inliers, error_sum }
}

/// Whether `a` beats `b`: more inliers, then lower mean inlier error.
fn better(a: &Consensus, b: &Consensus) -> bool {
    if a.inliers.len() != b.inliers.len() {
        return a.inliers.len() > b.inliers.len();
    }
    !a.inliers.is_empty() && a.error_sum * (b.inliers.len() as f64) < b.error_sum * (a.inliers.len() as f64)
}

/// RANSAC over P3P hypotheses for index-aligned world points and pixels.
pub fn estimate_pose(
    camera: &PinholeCamera,
    points: &[Vec3],
    pixels: &[Vec2],
    params: &RansacParams,
) -> Result<RansacOutcome<IndexedEstimate>> {
    params.validate()?;
    if points.len() != pixels.len() {
        return Err(Error::DimensionMismatch {
            context: "RANSAC correspondences".into(),
            expected: points.len(),
            actual: pixels.len(),
        });
    }
    let n = points.len();
    if n < SAMPLE_SIZE {
        return Ok(RansacOutcome::NoPose {
            reason: NoPoseReason::InsufficientMatches,
            best_inliers: 0,
            num_iterations_used: 0,
        });
    }
    let bearings: Vec<Vec3> = pixels.iter().map(|u| camera.bearing(u)).collect();
    let threshold = params.reprojection_threshold_px;
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);

    let mut best: Option<(Pose, Consensus)> = None;
    let mut required = params.max_iterations;
    let mut iterations = 0;
    while iterations < required {
        iterations += 1;
        let sample = index::sample(&mut rng, n, SAMPLE_SIZE).into_vec();
        let (s, check) = ([sample[0], sample[1], sample[2]], sample[3]);
        let Ok(candidates) = solve_p3p(&s.map(|i| bearings[i]), &s.map(|i| points[i])) else {
            continue;
        };
        let Some(hypothesis) = candidates
            .iter()
            .map(|p| (p, reprojection_error(camera, p, &points[check], &pixels[check])))
            .filter(|(_, e)| e.is_finite())
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(p, _)| *p)
        else {
            continue;
        };
        let c = consensus(camera, &hypothesis, points, pixels, threshold);
        if best.as_ref().is_none_or(|(_, b)| better(&c, b)) {
            required = params.required_iterations(c.inliers.len() as f64 / n as f64);
            best = Some((hypothesis, c));
        }
    }

    let Some((mut pose, mut support)) = best else {
        return Ok(RansacOutcome::NoPose {
            reason: NoPoseReason::InsufficientInliers,
            best_inliers: 0,
            num_iterations_used: iterations,
        });
    };
    if params.refine && support.inliers.len() >= SAMPLE_SIZE {
        let inlier_points: Vec<Vec3> = support.inliers.iter().map(|&i| points[i]).collect();
        let inlier_pixels: Vec<Vec2> = support.inliers.iter().map(|&i| pixels[i]).collect();
        let refined = refine_pose(camera, &pose, &inlier_points, &inlier_pixels);
        let recount = consensus(camera, &refined, points, pixels, threshold);
        if recount.inliers.len() >= support.inliers.len() {
            pose = refined;
            support = recount;
        }
    }
    if support.inliers.len() < params.min_inliers {
        return Ok(RansacOutcome::NoPose {
            reason: NoPoseReason::InsufficientInliers,
            best_inliers: support.inliers.len(),
            num_iterations_used: iterations,
        });
    }
    Ok(RansacOutcome::Pose(IndexedEstimate {
        pose,
        inliers: support.inliers,
        num_iterations_used: iterations,
    }))
}

/// RANSAC on 2D-3D matches of a query, with landmark positions from `map`.
pub fn ransac_pnp(
    matches: &[Match2D3D],
    map: &VisualMap,
    query: &QueryFrame,
    params: &RansacParams,
) -> Result<RansacOutcome<PoseEstimate>> {
    let mut points = Vec::with_capacity(matches.len());
    let mut pixels = Vec::with_capacity(matches.len());
    for m in matches {
        let lm = map.landmark(m.landmark_id).ok_or(Error::UnknownId {
            kind: "landmark",
            id: m.landmark_id.0,
        })?;
        let px = query.keypoints.get(m.keypoint_index).ok_or(Error::UnknownId {
            kind: "keypoint",
            id: m.keypoint_index as u64,
        })?;
        points.push(lm.position);
        pixels.push(*px);
    }
    Ok(match estimate_pose(&query.camera, &points, &pixels, params)? {
        RansacOutcome::Pose(e) => RansacOutcome::Pose(PoseEstimate {
            pose: e.pose,
            inlier_matches: e.inliers.iter().map(|&i| matches[i]).collect(),
            num_iterations_used: e.num_iterations_used,
        }),
        RansacOutcome::NoPose {
            reason,
            best_inliers,
            num_iterations_used,
        } => RansacOutcome::NoPose {
            reason,
            best_inliers,
            num_iterations_used,
        },
    })
}
