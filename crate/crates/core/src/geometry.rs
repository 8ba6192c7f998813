//! Rigid poses, the pinhole camera model and the error measures used to
//! compare poses.
//!
//! Camera frame convention: +z forward, +x right, +y down, with the pixel
//! origin at the top-left image corner. Keypoints are assumed undistorted.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;

/// Depth below which a camera-frame point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

/// Maximum deviation of a stored quaternion norm from 1 accepted on load.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-3;

/// World-to-camera rigid transform: `p_cam = R * p_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vec3::zeros())
    }

    /// Builds a pose from a `(w, x, y, z)` quaternion and a translation.
    ///
    /// The quaternion is renormalized unless its norm is already 1 up to
    /// rounding, so stored poses load bit-exactly; it is rejected when its norm
    /// is off by more than [`QUATERNION_NORM_TOLERANCE`].
    pub fn from_wxyz(q: [f64; 4], t: [f64; 3]) -> Result<Self> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
            return Err(Error::invalid(
                "q_wxyz",
                format!("quaternion norm {norm} is not within {QUATERNION_NORM_TOLERANCE} of 1"),
            ));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("t_xyz", "translation is not finite"));
        }
        let rotation = if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
            UnitQuaternion::new_unchecked(quat)
        } else {
            UnitQuaternion::from_quaternion(quat)
        };
        Ok(Self::new(rotation, Vec3::from(t)))
    }

    /// Pose of a camera located at `center` (world frame) with the given
    /// world-to-camera rotation.
    pub fn from_center(rotation: UnitQuaternion<f64>, center: Vec3) -> Self {
        let translation = -(rotation * center);
        Self::new(rotation, translation)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Quaternion as `[w, x, y, z]`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn t_xyz(&self) -> [f64; 3] {
        [self.translation.x, self.translation.y, self.translation.z]
    }

    /// Maps a world point into the camera frame.
    pub fn transform(&self, point: &Vec3) -> Vec3 {
        self.rotation * point + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let rotation = self.rotation.inverse();
        Pose::new(rotation, -(rotation * self.translation))
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.inverse() * self.translation)
    }
}

/// Pinhole intrinsics with image bounds, all in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl PinholeCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: f64, height: f64) -> Result<Self> {
        let camera = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        camera.validate()?;
        Ok(camera)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.fx, self.fy, self.cx, self.cy, self.width, self.height];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("camera", "non-finite intrinsics"));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid("camera", "focal lengths must be positive"));
        }
        if !(0.0..=self.width).contains(&self.cx) || !(0.0..=self.height).contains(&self.cy) {
            return Err(Error::invalid(
                "camera",
                "principal point must lie inside the image",
            ));
        }
        Ok(())
    }

    pub fn contains(&self, pixel: &Vec2) -> bool {
        (0.0..=self.width).contains(&pixel.x) && (0.0..=self.height).contains(&pixel.y)
    }

    /// Projects a camera-frame point. `None` when the point is behind the
    /// camera (`z <= MIN_DEPTH`).
    pub fn project_camera_point(&self, p: &Vec3) -> Option<Vec2> {
        if p.z <= MIN_DEPTH {
            return None;
        }
        Some(Vec2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Projects a world point seen from `pose`.
    pub fn project(&self, pose: &Pose, point: &Vec3) -> Option<Vec2> {
        self.project_camera_point(&pose.transform(point))
    }

    /// Unit viewing ray through a pixel, in the camera frame.
    pub fn bearing(&self, pixel: &Vec2) -> Vec3 {
        Vec3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
        .normalize()
    }
}

/// Difference between two poses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseError {
    /// Distance between camera centers, meters.
    pub position_m: f64,
    /// Angle of the relative rotation, degrees in `[0, 180]`.
    pub angle_deg: f64,
}

/// Camera-center distance and relative rotation angle between two poses.
///
/// Both quantities are computed from expressions symmetric in `a` and `b`,
/// so `pose_error(a, b) == pose_error(b, a)` bit for bit.
pub fn pose_error(a: &Pose, b: &Pose) -> PoseError {
    let position_m = (a.center() - b.center()).norm();
    PoseError {
        position_m,
        angle_deg: rotation_angle_between(&a.rotation, &b.rotation).to_degrees(),
    }
}

/// Angle between two vectors, radians. Uses `atan2(|a×b|, a·b)`, which is
/// accurate near 0 and π.
pub fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Rotation angle of `qa * qb⁻¹`, radians in `[0, π]`.
///
/// With both quaternions on the same hemisphere (sign flipped so their dot
/// product is non-negative) and angle `φ` between them in 4-space,
/// `|qa - qb| = 2 sin(φ/2)`, `|qa + qb| = 2 cos(φ/2)`, and the rotation angle
/// is `2φ`. This stays accurate for tiny angles where `acos` does not.
pub fn rotation_angle_between(qa: &UnitQuaternion<f64>, qb: &UnitQuaternion<f64>) -> f64 {
    let a = qa.as_ref().coords;
    let mut b = qb.as_ref().coords;
    if a.dot(&b) < 0.0 {
        b = -b;
    }
    let diff = (a - b).norm();
    let sum = (a + b).norm();
    4.0 * diff.atan2(sum)
}
