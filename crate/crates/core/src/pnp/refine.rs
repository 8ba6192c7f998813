//! Reprojection residuals and Levenberg-Marquardt pose refinement.
//!
//! Poses are perturbed on the left: `R ← exp(ω)·R`, `t ← t + δt`, with the
//! parameter vector ordered `(ω, δt)`.

use nalgebra::{Matrix2x6, Matrix6, UnitQuaternion, Vector2, Vector6};

use crate::geometry::{PinholeCamera, Pose, Vec2, Vec3, MIN_DEPTH};

/// Relative cost decrease (or step size) below which refinement stops.
pub const CONVERGENCE_TOLERANCE: f64 = 1e-10;
/// Iteration cap of the refinement.
pub const MAX_REFINE_ITERATIONS: usize = 50;

/// Applies a left perturbation `(ω, δt)` to a pose.
pub fn perturb(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    let omega = Vec3::new(delta[0], delta[1], delta[2]);
    let dt = Vec3::new(delta[3], delta[4], delta[5]);
    Pose::new(
        UnitQuaternion::from_scaled_axis(omega) * pose.rotation(),
        pose.translation() + dt,
    )
}

/// Projection of `point` and its Jacobian with respect to `(ω, δt)` at zero
/// perturbation. `None` when the point is not in front of the camera.
pub fn reprojection_jacobian(
    camera: &PinholeCamera,
    pose: &Pose,
    point: &Vec3,
) -> Option<(Vec2, Matrix2x6<f64>)> {
    let rotated = pose.rotation() * point;
    let p = rotated + pose.translation();
    if p.z <= MIN_DEPTH {
        return None;
    }
    let iz = 1.0 / p.z;
    let proj = Vec2::new(camera.fx * p.x * iz + camera.cx, camera.fy * p.y * iz + camera.cy);
    // d(pixel)/d(p)
    let a = [camera.fx * iz, 0.0, -camera.fx * p.x * iz * iz];
    let b = [0.0, camera.fy * iz, -camera.fy * p.y * iz * iz];
    // d(p)/d(ω) = −[R·x]×, d(p)/d(δt) = I
    let (x, y, z) = (rotated.x, rotated.y, rotated.z);
    let dp_domega = [[0.0, z, -y], [-z, 0.0, x], [y, -x, 0.0]];
    let mut j = Matrix2x6::zeros();
    for col in 0..3 {
        let d = [dp_domega[0][col], dp_domega[1][col], dp_domega[2][col]];
        j[(0, col)] = a[0] * d[0] + a[1] * d[1] + a[2] * d[2];
        j[(1, col)] = b[0] * d[0] + b[1] * d[1] + b[2] * d[2];
        j[(0, col + 3)] = a[col];
        j[(1, col + 3)] = b[col];
    }
    Some((proj, j))
}

/// Pixel distance between the projection of `point` and `pixel`; infinite
/// for points behind the camera.
pub fn reprojection_error(camera: &PinholeCamera, pose: &Pose, point: &Vec3, pixel: &Vec2) -> f64 {
    match camera.project_camera_point(&pose.transform(point)) {
        Some(p) => (p - pixel).norm(),
        None => f64::INFINITY,
    }
}

fn total_cost(camera: &PinholeCamera, pose: &Pose, points: &[Vec3], pixels: &[Vec2]) -> f64 {
    points
        .iter()
        .zip(pixels)
        .map(|(x, u)| {
            let e = reprojection_error(camera, pose, x, u);
            e * e
        })
        .sum()
}

/// Minimizes the summed squared reprojection error over all pairs, starting
/// from `initial`. Never returns a pose with a higher cost than `initial`.
pub fn refine_pose(camera: &PinholeCamera, initial: &Pose, points: &[Vec3], pixels: &[Vec2]) -> Pose {
    let mut pose = *initial;
    let mut cost = total_cost(camera, &pose, points, pixels);
    if !cost.is_finite() || points.len() < 3 {
        return pose;
    }
    let mut mu = 1e-3;
    for _ in 0..MAX_REFINE_ITERATIONS {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (x, u) in points.iter().zip(pixels) {
            let Some((proj, j)) = reprojection_jacobian(camera, &pose, x) else {
                continue;
            };
            let r: Vector2<f64> = proj - u;
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let mut improved = false;
        // Raise damping until a step lowers the cost.
        for _ in 0..10 {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += mu * h[(i, i)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-g))) else {
                mu *= 10.0;
                continue;
            };
            let candidate = perturb(&pose, &step);
            let new_cost = total_cost(camera, &candidate, points, pixels);
            if new_cost < cost {
                let decrease = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                pose = candidate;
                cost = new_cost;
                mu = (mu * 0.1).max(1e-12);
                improved = true;
                if decrease < CONVERGENCE_TOLERANCE || step.norm() < CONVERGENCE_TOLERANCE {
                    return pose;
                }
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    pose
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose_error;

    fn camera() -> PinholeCamera {
        PinholeCamera::new(500.0, 480.0, 320.0, 240.0, 640.0, 480.0).unwrap()
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let cam = camera();
        let pose = Pose::new(
            UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3),
            Vec3::new(0.3, -0.1, 0.5),
        );
        let x = Vec3::new(0.5, 0.4, 6.0);
        let (_, j) = reprojection_jacobian(&cam, &pose, &x).unwrap();
        let h = 1e-6;
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = h;
            let plus = cam.project(&perturb(&pose, &d), &x).unwrap();
            let minus = cam.project(&perturb(&pose, &(-d)), &x).unwrap();
            let fd = (plus - minus) / (2.0 * h);
            assert!((fd - j.column(k)).norm() < 1e-5 * fd.norm().max(1.0), "column {k}");
        }
    }

    #[test]
    fn refinement_recovers_perturbed_pose() {
        let cam = camera();
        let truth = Pose::new(UnitQuaternion::from_euler_angles(0.05, 0.1, -0.02), Vec3::new(0.2, 0.0, 0.1));
        let points: Vec<Vec3> = (0..30)
            .map(|i| {
                let f = i as f64;
                Vec3::new((f * 0.37).sin() * 2.0, (f * 0.73).cos() * 1.5, 5.0 + (f * 0.19).sin() * 2.0)
            })
            .collect();
        let pixels: Vec<Vec2> = points.iter().map(|x| cam.project(&truth, x).unwrap()).collect();
        let start = perturb(&truth, &Vector6::new(0.02, -0.01, 0.015, 0.05, -0.03, 0.04));
        let refined = refine_pose(&cam, &start, &points, &pixels);
        let err = pose_error(&refined, &truth);
        assert!(err.position_m < 1e-8 && err.angle_deg < 1e-7, "{err:?}");
    }
}
