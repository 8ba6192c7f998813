//! Minimal absolute pose from three bearing/point pairs.
//!
//! The unknown depths `λ` satisfy three quadrics `|λi·yi − λj·yj|² = |xi − xj|²`.
//! Two homogeneous combinations of them span a pencil of conics; a
//! degenerate member of the pencil (a root of a cubic) factors into two
//! lines through the origin. Intersecting each line with the remaining
//! constraints gives at most four depth triples, which are polished with
//! Newton steps and turned into poses by aligning the two point triangles.

use nalgebra::{Matrix3, SymmetricEigen, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{angle_between, Pose, Vec3};

/// Minimum pairwise distance between the world points.
pub const MIN_POINT_DISTANCE: f64 = 1e-9;
/// Minimum area of the world triangle.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;
/// Bearings closer than this (radians) are treated as coincident.
pub const MIN_BEARING_ANGLE: f64 = 1e-12;
/// Every returned pose reproduces each bearing within this angle (radians).
pub const BEARING_TOLERANCE: f64 = 1e-6;

/// All poses mapping `points` (world) onto the rays `bearings` (camera),
/// i.e. `R·xi + t = λi·yi` with `λi > 0`. Between 0 and 4 solutions.
pub fn solve_p3p(bearings: &[Vec3; 3], points: &[Vec3; 3]) -> Result<Vec<Pose>> {
    let [x1, x2, x3] = points;
    let d12 = x1 - x2;
    let d13 = x1 - x3;
    let d23 = x2 - x3;
    if d12.norm() <= MIN_POINT_DISTANCE
        || d13.norm() <= MIN_POINT_DISTANCE
        || d23.norm() <= MIN_POINT_DISTANCE
    {
        return Err(Error::DegenerateConfiguration("coincident points"));
    }
    if 0.5 * d12.cross(&d13).norm() <= MIN_TRIANGLE_AREA {
        return Err(Error::DegenerateConfiguration("collinear points"));
    }

    let mut y = [Vec3::zeros(); 3];
    for (yi, b) in y.iter_mut().zip(bearings) {
        let n = b.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::DegenerateConfiguration("zero bearing"));
        }
        *yi = b / n;
    }
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        if angle_between(&y[i], &y[j]) < MIN_BEARING_ANGLE {
            return Err(Error::DegenerateConfiguration("coincident bearings"));
        }
    }

    // Work with unit-scale distances for conditioning.
    let scale2 = d12.norm_squared().max(d13.norm_squared()).max(d23.norm_squared());
    let c = Coefficients {
        a12: d12.norm_squared() / scale2,
        a13: d13.norm_squared() / scale2,
        a23: d23.norm_squared() / scale2,
        b12: -2.0 * y[0].dot(&y[1]),
        b13: -2.0 * y[0].dot(&y[2]),
        b23: -2.0 * y[1].dot(&y[2]),
    };
    let scale = scale2.sqrt();

    let mut poses: Vec<Pose> = Vec::with_capacity(4);
    for lambda in depth_candidates(&c) {
        let lambda = c.refine(lambda) * scale;
        if lambda.iter().any(|&l| !(l > 0.0)) {
            continue;
        }
        let Some(pose) = align(&y, &lambda, points) else {
            continue;
        };
        let consistent = points.iter().zip(&y).all(|(x, yi)| {
            let p = pose.transform(x);
            p.dot(yi) > 0.0 && angle_between(&p, yi) < BEARING_TOLERANCE
        });
        let duplicate = poses.iter().any(|q| {
            (q.rotation_matrix() - pose.rotation_matrix()).amax() < 1e-9
                && (q.translation() - pose.translation()).amax() < 1e-9 * scale.max(1.0)
        });
        if consistent && !duplicate {
            poses.push(pose);
        }
    }
    Ok(poses)
}

struct Coefficients {
    a12: f64,
    a13: f64,
    a23: f64,
    b12: f64,
    b13: f64,
    b23: f64,
}

impl Coefficients {
    fn residuals(&self, l: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            l[0] * l[0] + l[1] * l[1] + self.b12 * l[0] * l[1] - self.a12,
            l[0] * l[0] + l[2] * l[2] + self.b13 * l[0] * l[2] - self.a13,
            l[1] * l[1] + l[2] * l[2] + self.b23 * l[1] * l[2] - self.a23,
        )
    }

    /// Newton iterations on the three distance constraints, kept only while
    /// the residual shrinks.
    fn refine(&self, mut l: Vector3<f64>) -> Vector3<f64> {
        let mut r = self.residuals(&l);
        for _ in 0..6 {
            let j = Matrix3::new(
                2.0 * l[0] + self.b12 * l[1],
                2.0 * l[1] + self.b12 * l[0],
                0.0,
                2.0 * l[0] + self.b13 * l[2],
                0.0,
                2.0 * l[2] + self.b13 * l[0],
                0.0,
                2.0 * l[1] + self.b23 * l[2],
                2.0 * l[2] + self.b23 * l[1],
            );
            let Some(step) = j.lu().solve(&(-r)) else {
                break;
            };
            let next = l + step;
            let rn = self.residuals(&next);
            if !(rn.norm() < r.norm()) {
                break;
            }
            l = next;
            r = rn;
            if r.amax() < 1e-15 {
                break;
            }
        }
        l
    }

    /// `λᵀ·D·λ = 0` forms of the pair constraints, with `M_ij` the quadric of
    /// `|λi·yi − λj·yj|²`.
    fn pencil(&self) -> (Matrix3<f64>, Matrix3<f64>) {
        let m12 = Matrix3::new(1.0, 0.5 * self.b12, 0.0, 0.5 * self.b12, 1.0, 0.0, 0.0, 0.0, 0.0);
        let m13 = Matrix3::new(1.0, 0.0, 0.5 * self.b13, 0.0, 0.0, 0.0, 0.5 * self.b13, 0.0, 1.0);
        let m23 = Matrix3::new(0.0, 0.0, 0.0, 0.0, 1.0, 0.5 * self.b23, 0.0, 0.5 * self.b23, 1.0);
        (m12 * self.a23 - m23 * self.a12, m13 * self.a23 - m23 * self.a13)
    }
}

/// Depth triples on the line pairs of the first degenerate pencil member
/// that yields any.
fn depth_candidates(c: &Coefficients) -> Vec<Vector3<f64>> {
    let (d1, d2) = c.pencil();
    // det(D1 + γ·D2) = det D1 + γ·tr(adj(D1)·D2) + γ²·tr(D1·adj(D2)) + γ³·det D2.
    let roots = real_cubic_roots(
        d2.determinant(),
        (d1 * adjugate(&d2)).trace(),
        (adjugate(&d1) * d2).trace(),
        d1.determinant(),
    );
    let mut gammas: Vec<Option<f64>> = roots.into_iter().map(Some).collect();
    gammas.sort_by(|a, b| b.unwrap().abs().total_cmp(&a.unwrap().abs()));
    // D2 itself is the member at γ = ∞.
    gammas.push(None);

    for gamma in gammas {
        let d0 = match gamma {
            Some(g) => d1 + d2 * g,
            None => d2,
        };
        let found = lines_to_depths(c, &d0);
        if !found.is_empty() {
            return found;
        }
    }
    Vec::new()
}

fn lines_to_depths(c: &Coefficients, d0: &Matrix3<f64>) -> Vec<Vector3<f64>> {
    let eig = SymmetricEigen::new(*d0);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].abs().total_cmp(&eig.eigenvalues[a].abs()));
    let (l0, l1) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if l0 == 0.0 {
        return Vec::new();
    }
    let ratio = -l1 / l0;
    // A near-zero third eigenvalue is required for the member to be degenerate.
    if eig.eigenvalues[order[2]].abs() > 1e-6 * l0.abs() || ratio < -1e-9 {
        return Vec::new();
    }
    let v = ratio.max(0.0).sqrt();
    let u0 = eig.eigenvectors.column(order[0]).into_owned();
    let u1 = eig.eigenvectors.column(order[1]).into_owned();

    let mut out = Vec::new();
    for s in [v, -v] {
        // Line (u0 − s·u1)·λ = 0, solved for λ1 = w0·λ2 + w1·λ3.
        let n = u0 - u1 * s;
        if n[0].abs() < 1e-14 {
            continue;
        }
        let w0 = -n[1] / n[0];
        let w1 = -n[2] / n[0];
        // a13·(12-constraint) − a12·(13-constraint) in τ = λ3/λ2.
        let qa = (c.a13 - c.a12) * w1 * w1 - c.a12 * c.b13 * w1 - c.a12;
        let qb = c.a13 * c.b12 * w1 - c.a12 * c.b13 * w0 + 2.0 * w0 * w1 * (c.a13 - c.a12);
        let qc = (c.a13 - c.a12) * w0 * w0 + c.a13 * c.b12 * w0 + c.a13;
        for tau in real_quadratic_roots(qa, qb, qc) {
            if !(tau > 0.0) {
                continue;
            }
            let d = c.a23 / (tau * (c.b23 + tau) + 1.0);
            if !(d > 0.0) {
                continue;
            }
            let l2 = d.sqrt();
            let l3 = tau * l2;
            let l1 = w0 * l2 + w1 * l3;
            if l1 > 0.0 {
                out.push(Vector3::new(l1, l2, l3));
            }
        }
    }
    out
}

/// Rigid motion taking the world triangle onto the camera-frame triangle.
fn align(y: &[Vec3; 3], lambda: &Vector3<f64>, x: &[Vec3; 3]) -> Option<Pose> {
    let p = [y[0] * lambda[0], y[1] * lambda[1], y[2] * lambda[2]];
    let frame = |a: &[Vec3; 3]| {
        let e1 = a[0] - a[1];
        let e2 = a[0] - a[2];
        Matrix3::from_columns(&[e1, e2, e1.cross(&e2)])
    };
    let xf = frame(x);
    let yf = frame(&p);
    let r = yf * xf.try_inverse()?;
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    let rotation = UnitQuaternion::from_matrix(&r);
    let centroid_x = (x[0] + x[1] + x[2]) / 3.0;
    let centroid_p = (p[0] + p[1] + p[2]) / 3.0;
    let t = centroid_p - rotation * centroid_x;
    Some(Pose::new(rotation, t))
}

fn adjugate(m: &Matrix3<f64>) -> Matrix3<f64> {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[(r0, c0)] * m[(r1, c1)] - m[(r0, c1)] * m[(r1, c0)];
    // Transposed cofactor matrix.
    Matrix3::new(
        c(1, 2, 1, 2),
        -c(0, 2, 1, 2),
        c(0, 1, 1, 2),
        -c(1, 2, 0, 2),
        c(0, 2, 0, 2),
        -c(0, 1, 0, 2),
        c(1, 2, 0, 1),
        -c(0, 2, 0, 1),
        c(0, 1, 0, 1),
    )
}

fn real_quadratic_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    if a == 0.0 {
        return if b != 0.0 { vec![-c / b] } else { Vec::new() };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Vec::new();
    }
    // Numerically stable pair.
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    if q == 0.0 {
        return vec![0.0];
    }
    vec![q / a, c / q]
}

/// Real roots of `c3·x³ + c2·x² + c1·x + c0`, polished by Newton steps.
pub(crate) fn real_cubic_roots(c3: f64, c2: f64, c1: f64, c0: f64) -> Vec<f64> {
    let scale = c3.abs().max(c2.abs()).max(c1.abs()).max(c0.abs());
    if scale == 0.0 {
        return Vec::new();
    }
    if c3.abs() <= 1e-14 * scale {
        return real_quadratic_roots(c2, c1, c0);
    }
    let (a, b, c) = (c2 / c3, c1 / c3, c0 / c3);
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let disc = 0.25 * q * q + p * p * p / 27.0;
    let shift = -a / 3.0;
    let mut roots = if disc > 0.0 {
        let s = disc.sqrt();
        vec![(-0.5 * q + s).cbrt() + (-0.5 * q - s).cbrt() + shift]
    } else if p == 0.0 {
        vec![(-q).cbrt() + shift]
    } else {
        let m = 2.0 * (-p / 3.0).sqrt();
        let arg = (3.0 * q / (p * m)).clamp(-1.0, 1.0);
        let theta = arg.acos() / 3.0;
        (0..3)
            .map(|k| m * (theta - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos() + shift)
            .collect()
    };
    let f = |x: f64| ((x + a) * x + b) * x + c;
    let df = |x: f64| (3.0 * x + 2.0 * a) * x + b;
    for r in &mut roots {
        for _ in 0..3 {
            let d = df(*r);
            if d == 0.0 {
                break;
            }
            let next = *r - f(*r) / d;
            if f(next).abs() < f(*r).abs() {
                *r = next;
            } else {
                break;
            }
        }
    }
    roots
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_angle_between;

    #[test]
    fn identity_configuration() {
        let points = [
            Vec3::new(1.0, 0.0, 5.0),
            Vec3::new(-1.0, 0.0, 5.0),
            Vec3::new(0.0, 1.0, 5.0),
        ];
        let bearings = points.map(|p| p.normalize());
        let poses = solve_p3p(&bearings, &points).unwrap();
        assert!(poses.len() <= 4);
        assert!(poses.iter().any(|p| {
            rotation_angle_between(p.rotation(), &UnitQuaternion::identity()) < 1e-9
                && p.translation().norm() < 1e-9
        }));
    }

    #[test]
    fn degenerate_inputs() {
        let collinear = [
            Vec3::new(0.0, 0.0, 5.0),
            Vec3::new(0.0, 0.0, 6.0),
            Vec3::new(0.0, 0.0, 7.0),
        ];
        let b = [Vec3::x(), Vec3::y(), Vec3::z()];
        assert!(matches!(
            solve_p3p(&b, &collinear),
            Err(Error::DegenerateConfiguration(_))
        ));
        let points = [Vec3::new(1.0, 0.0, 5.0), Vec3::new(-1.0, 0.0, 5.0), Vec3::new(0.0, 1.0, 5.0)];
        let same = [Vec3::z(), Vec3::z(), Vec3::x()];
        assert!(solve_p3p(&same, &points).is_err());
        let coincident = [points[0], points[0], points[2]];
        assert!(solve_p3p(&b, &coincident).is_err());
    }

    #[test]
    fn cubic_roots() {
        // (x − 1)(x − 2)(x + 3) = x³ − 7x + 6
        let mut r = real_cubic_roots(1.0, 0.0, -7.0, 6.0);
        r.sort_by(f64::total_cmp);
        assert_eq!(r.len(), 3);
        for (a, b) in r.iter().zip([-3.0, 1.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        // x³ + x + 1 has a single real root near −0.6823.
        let r = real_cubic_roots(2.0, 0.0, 2.0, 2.0);
        assert_eq!(r.len(), 1);
        assert!((r[0] + 0.682_327_803_828_019_3).abs() < 1e-12);
    }

    #[test]
    fn adjugate_matches_inverse() {
        let m = Matrix3::new(2.0, 1.0, 0.5, 1.0, 3.0, -1.0, 0.5, -1.0, 4.0);
        let adj = adjugate(&m);
        let inv = m.try_inverse().unwrap();
        assert!((adj - inv * m.determinant()).amax() < 1e-12);
    }
}
