//! Scaled-orthographic cameras, pose estimation and 2D similarity registration.

use nalgebra::{Matrix2x3, Matrix3, Matrix6, Rotation3, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::model::{ShapeCoefficients, ShapeModel};

/// Side length of the square registration canvas, in pixels.
pub const TEMPLATE_CANVAS: f64 = 224.0;
/// Fraction of the canvas spanned by the template's landmark bounding box.
pub const TEMPLATE_FILL: f64 = 0.7;

/// Weak-perspective camera: `x_2d = scale * (R x)[0..2] + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Rotation3<f64>,
    pub scale: f64,
    pub translation: Vector2<f64>,
}

impl CameraPose {
    pub fn new(rotation: Rotation3<f64>, scale: f64, translation: Vector2<f64>) -> Result<Self> {
        let pose = CameraPose {
            rotation,
            scale,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        CameraPose {
            rotation: Rotation3::identity(),
            scale: 1.0,
            translation: Vector2::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation.matrix();
        let defect = (r.transpose() * r - Matrix3::identity()).amax();
        if defect > 1e-8 {
            return Err(Error::Invariant(format!("rotation not orthonormal ({defect:e})")));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > 1e-8 {
            return Err(Error::Invariant(format!("rotation determinant {det}")));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Invariant(format!("camera scale {} is not positive", self.scale)));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Invariant("camera translation not finite".to_string()));
        }
        Ok(())
    }

    /// The 2×3 linear part `scale * R[0..2, :]`.
    pub fn linear(&self) -> Matrix2x3<f64> {
        self.rotation.matrix().fixed_rows::<2>(0) * self.scale
    }

    pub fn project_point(&self, p: &Vector3<f64>) -> Vector2<f64> {
        self.linear() * p + self.translation
    }

    pub fn project(&self, points: &[Vector3<f64>]) -> Vec<Vector2<f64>> {
        let a = self.linear();
        points.iter().map(|p| a * p + self.translation).collect()
    }

    /// Geodesic angle between two rotations, in radians.
    pub fn rotation_angle_to(&self, other: &CameraPose) -> f64 {
        rotation_angle_between(&self.rotation, &other.rotation)
    }
}

/// Geodesic angle between rotations via `atan2(sin, cos)`, which stays
/// finite and accurate when the rotations nearly coincide.
pub fn rotation_angle_between(a: &Rotation3<f64>, b: &Rotation3<f64>) -> f64 {
    let r = a.matrix().transpose() * b.matrix();
    let sin = 0.5
        * Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
    let cos = 0.5 * (r.trace() - 1.0);
    sin.atan2(cos)
}

/// Weighted sum of squared reprojection residuals.
pub fn reprojection_sse(
    pose: &CameraPose,
    points3d: &[Vector3<f64>],
    points2d: &[Vector2<f64>],
    weights: &[f64],
) -> f64 {
    let a = pose.linear();
    points3d
        .iter()
        .zip(points2d)
        .zip(weights)
        .map(|((p, q), w)| w * (a * p + pose.translation - q).norm_squared())
        .sum()
}

fn check_correspondences(points3d: usize, points2d: usize, weights: usize) -> Result<()> {
    if points2d != points3d {
        return Err(Error::DimensionMismatch {
            context: "2D points",
            expected: points3d,
            actual: points2d,
        });
    }
    if weights != points3d {
        return Err(Error::DimensionMismatch {
            context: "point weights",
            expected: points3d,
            actual: weights,
        });
    }
    Ok(())
}

/// Weighted least-squares scaled-orthographic pose from 3D-2D correspondences.
///
/// Fits the unconstrained 2×3 map between centred point sets, takes its
/// nearest row-orthonormal factor (polar decomposition), completes the third
/// row by a cross product so `det R = +1`, then picks the scale that is
/// least-squares optimal for that rotation and the translation that zeroes
/// the weighted centroid residual.
pub fn estimate_pose(
    points3d: &[Vector3<f64>],
    points2d: &[Vector2<f64>],
    weights: &[f64],
) -> Result<CameraPose> {
    check_correspondences(points3d.len(), points2d.len(), weights.len())?;
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument("pose weights must be finite and non-negative".into()));
    }
    let effective = weights.iter().filter(|&&w| w > 0.0).count();
    let total: f64 = weights.iter().sum();
    if effective < 4 {
        return Err(Error::Degenerate {
            context: "pose estimation needs at least 4 weighted points",
            singular_values: Vec::new(),
        });
    }
    let mut c3 = Vector3::zeros();
    let mut c2 = Vector2::zeros();
    for ((p, q), w) in points3d.iter().zip(points2d).zip(weights) {
        c3 += p * *w;
        c2 += q * *w;
    }
    c3 /= total;
    c2 /= total;

    let mut spread = Matrix3::zeros();
    let mut cross = Matrix2x3::zeros();
    for ((p, q), w) in points3d.iter().zip(points2d).zip(weights) {
        let dp = p - c3;
        let dq = q - c2;
        spread += dp * dp.transpose() * *w;
        cross += dq * dp.transpose() * *w;
    }
    let sv = spread.singular_values();
    let (hi, lo) = (sv.max(), sv.min());
    if !(lo > hi * 1e-12) || hi <= 0.0 {
        return Err(Error::Degenerate {
            context: "3D points are coplanar or collapsed",
            singular_values: sv.iter().map(|s| s.sqrt()).collect(),
        });
    }
    let spread_inv = spread.try_inverse().ok_or_else(|| Error::Degenerate {
        context: "3D point spread not invertible",
        singular_values: sv.iter().map(|s| s.sqrt()).collect(),
    })?;
    let linear = cross * spread_inv;

    let svd = linear.svd(true, true);
    let s = svd.singular_values;
    if !(s.min() > s.max() * 1e-12) {
        return Err(Error::Degenerate {
            context: "2D points do not span the image plane",
            singular_values: s.iter().cloned().collect(),
        });
    }
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let rows = u * v_t;
    let r0: Vector3<f64> = rows.row(0).transpose();
    let r1: Vector3<f64> = rows.row(1).transpose();
    let r2 = r0.cross(&r1);
    let rmat = Matrix3::from_rows(&[r0.transpose(), r1.transpose(), r2.transpose()]);
    let mut rotation = Rotation3::from_matrix_unchecked(rmat);
    rotation.renormalize();

    let r_top = rotation.matrix().fixed_rows::<2>(0).into_owned();
    let numer = (cross * r_top.transpose()).trace();
    let denom = (r_top * spread * r_top.transpose()).trace();
    let scale = numer / denom;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Degenerate {
            context: "non-positive camera scale",
            singular_values: s.iter().cloned().collect(),
        });
    }
    let translation = c2 - r_top * c3 * scale;
    CameraPose::new(rotation, scale, translation)
}

/// Levenberg–Marquardt polish of the exact weighted reprojection error.
///
/// Never returns a pose with a higher error than the input.
pub fn refine_pose(
    pose: &CameraPose,
    points3d: &[Vector3<f64>],
    points2d: &[Vector2<f64>],
    weights: &[f64],
    max_iterations: usize,
) -> CameraPose {
    let mut current = *pose;
    let mut cost = reprojection_sse(&current, points3d, points2d, weights);
    let mut damping = 1e-6;
    for _ in 0..max_iterations {
        let rot = *current.rotation.matrix();
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for ((p, q), &w) in points3d.iter().zip(points2d).zip(weights) {
            if w == 0.0 {
                continue;
            }
            let u = rot * p;
            let r = Vector2::new(u.x, u.y) * current.scale + current.translation - q;
            let s = current.scale;
            // Rows of d r / d(omega, scale, t) for the left-multiplied update exp([omega]x) R.
            let j0 = Vector6::new(0.0, s * u.z, -s * u.y, u.x, 1.0, 0.0);
            let j1 = Vector6::new(-s * u.z, 0.0, s * u.x, u.y, 0.0, 1.0);
            jtj += (j0 * j0.transpose() + j1 * j1.transpose()) * w;
            jtr += (j0 * r.x + j1 * r.y) * w;
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += damping * (jtj[(i, i)] + 1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-jtr))) else {
                damping *= 10.0;
                continue;
            };
            let omega = Vector3::new(step[0], step[1], step[2]);
            let candidate = CameraPose {
                rotation: Rotation3::from_scaled_axis(omega) * current.rotation,
                scale: current.scale + step[3],
                translation: current.translation + Vector2::new(step[4], step[5]),
            };
            if candidate.scale > 0.0 {
                let c = reprojection_sse(&candidate, points3d, points2d, weights);
                if c < cost {
                    let rel = (cost - c) / cost.max(f64::MIN_POSITIVE);
                    current = candidate;
                    cost = c;
                    damping = (damping * 0.3).max(1e-12);
                    improved = rel > 1e-15;
                    break;
                }
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    // Re-orthonormalise accumulated rotation updates.
    current.rotation = Rotation3::from_matrix_eps(current.rotation.matrix(), 1e-15, 20, current.rotation);
    current
}

/// In-plane similarity `x -> scale * R(angle) x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity2D {
    pub scale: f64,
    pub rotation_angle: f64,
    pub translation: Vector2<f64>,
}

impl Similarity2D {
    pub fn identity() -> Self {
        Similarity2D {
            scale: 1.0,
            rotation_angle: 0.0,
            translation: Vector2::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let (sin, cos) = self.rotation_angle.sin_cos();
        Vector2::new(cos * p.x - sin * p.y, sin * p.x + cos * p.y) * self.scale + self.translation
    }

    pub fn apply_all(&self, points: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
        points.iter().map(|p| self.apply(p)).collect()
    }
}

/// Least-squares similarity (no reflection) taking `landmarks` onto `template`.
pub fn register_to_template(
    landmarks: &[Vector2<f64>],
    template: &[Vector2<f64>],
) -> Result<(Similarity2D, Vec<Vector2<f64>>)> {
    if landmarks.len() != template.len() {
        return Err(Error::DimensionMismatch {
            context: "template registration",
            expected: template.len(),
            actual: landmarks.len(),
        });
    }
    if landmarks.is_empty() {
        return Err(Error::EmptyInput("no landmarks to register".into()));
    }
    if landmarks.iter().chain(template).any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::InvalidArgument("non-finite landmark coordinates".into()));
    }
    let n = landmarks.len() as f64;
    let cx = landmarks.iter().sum::<Vector2<f64>>() / n;
    let cy = template.iter().sum::<Vector2<f64>>() / n;
    let (mut dot, mut crs, mut norm) = (0.0, 0.0, 0.0);
    for (x, y) in landmarks.iter().zip(template) {
        let a = x - cx;
        let b = y - cy;
        dot += a.dot(&b);
        crs += a.x * b.y - a.y * b.x;
        norm += a.norm_squared();
    }
    let spread = (norm / n).sqrt();
    if !(spread > 1e-12 * (1.0 + cx.norm())) {
        return Err(Error::Degenerate {
            context: "landmarks have zero spread",
            singular_values: vec![spread],
        });
    }
    let (a, b) = (dot / norm, crs / norm);
    let scale = a.hypot(b);
    let mut angle = b.atan2(a);
    if angle <= -std::f64::consts::PI {
        angle += 2.0 * std::f64::consts::PI;
    }
    let mut sim = Similarity2D {
        scale,
        rotation_angle: angle,
        translation: Vector2::zeros(),
    };
    sim.translation = cy - sim.apply(&cx);
    let registered = sim.apply_all(landmarks);
    Ok((sim, registered))
}

/// The 68-point registration template: orthographic projection of the mean
/// face's landmarks, isotropically scaled and centred so its bounding box
/// spans the central 70% of a 224×224 canvas.
pub fn template_from_model(model: &ShapeModel) -> Vec<Vector2<f64>> {
    let pts = model
        .landmarks_3d(&ShapeCoefficients::zeros(model))
        .expect("zero coefficients match the model");
    let xy: Vec<Vector2<f64>> = pts.iter().map(|p| Vector2::new(p.x, p.y)).collect();
    let (mut lo, mut hi) = (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY));
    for p in &xy {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = (hi - lo).max();
    let scale = TEMPLATE_FILL * TEMPLATE_CANVAS / extent;
    let centre = (lo + hi) / 2.0;
    let canvas_centre = Vector2::repeat(TEMPLATE_CANVAS / 2.0);
    xy.iter().map(|p| (p - centre) * scale + canvas_centre).collect()
}
