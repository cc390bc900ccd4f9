//! Camera-frame geometry: pinhole projection, rigid transforms, the
//! cross-ratio invariant, two-view triangulation, and a small quadratic
//! least-squares fitter.
//!
//! Conventions used throughout the crate:
//!
//! * Pixel coordinates originate at the top-left image corner, x grows
//!   right, y grows down.
//! * The camera frame is right-handed with x right, y down, z forward
//!   through the lens. Only points with z > 0 project.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use thiserror::Error;

/// Squared-distance threshold below which two points count as coincident.
pub const COINCIDENCE_EPS_SQ: f64 = 1e-12;

/// Ray angle (radians) below which two viewing rays count as parallel.
pub const PARALLEL_RAY_EPS: f64 = 1e-8;

/// Tolerance on orthonormality and determinant when validating rotations.
const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth (z = {z})")]
    NonPositiveDepth { z: f64 },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("viewing rays are parallel within {PARALLEL_RAY_EPS} rad")]
    ParallelRays,
    #[error("need at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("linear system is singular")]
    SingularSystem,
    #[error("matrix is not a rotation: {0}")]
    NotARotation(&'static str),
    #[error("invalid camera intrinsics: {0}")]
    InvalidCamera(&'static str),
}

// ==== POINTS ====

/// Pixel-space point (or any planar point; units depend on context).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point2) -> f64 {
        self.dist_sq(other).sqrt()
    }

    pub fn dist_sq(self, other: Point2) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// Metric 3D point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dist(self, other: Point3) -> f64 {
        self.dist_sq(other).sqrt()
    }

    pub fn dist_sq(self, other: Point3) -> f64 {
        let d = self.to_vector() - other.to_vector();
        d.norm_squared()
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

// ==== RIGID POSE ====

/// Proper rigid transform `p -> R p + t`. The rotation is validated on
/// construction (orthonormal, det +1, both within 1e-9) and every
/// exposed constructor preserves that invariant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let gram = rotation.transpose() * rotation;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        if ortho_err > ROTATION_TOL {
            return Err(GeometryError::NotARotation("R^T R deviates from identity"));
        }
        if (rotation.determinant() - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::NotARotation("determinant is not +1"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Point3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t.to_vector(),
        }
    }

    /// Rotation of `angle` radians about `axis` (right-hand rule), then
    /// translation by `t`. The axis must be nonzero.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, t: Point3) -> Result<Self, GeometryError> {
        if axis.norm_squared() < COINCIDENCE_EPS_SQ {
            return Err(GeometryError::DegenerateConfiguration("zero rotation axis"));
        }
        let rotation = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Ok(Self {
            rotation: rotation.into_inner(),
            translation: t.to_vector(),
        })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> Point3 {
        Point3::from_vector(self.translation)
    }

    pub fn transform(&self, p: Point3) -> Point3 {
        Point3::from_vector(self.rotation * p.to_vector() + self.translation)
    }

    /// `self.compose(other)` applies `other` first: `(self ∘ other)(p) = self(other(p))`.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Construction without the rotation check, for iterative solvers
    /// whose intermediate products may drift below validation tolerance.
    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Snaps the rotation to the nearest orthonormal matrix (Frobenius
    /// norm, via SVD), repairing accumulated numerical drift.
    pub fn orthonormalized(&self) -> RigidPose {
        let svd = nalgebra::SVD::new(self.rotation, true, true);
        let (u, v_t) = (svd.u.expect("svd"), svd.v_t.expect("svd"));
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut flipped = u;
            flipped.column_mut(2).neg_mut();
            r = flipped * v_t;
        }
        RigidPose { rotation: r, translation: self.translation }
    }
}

/// Applies `pose` to `p`. Method form `pose.transform(p)` is equivalent.
pub fn transform(pose: &RigidPose, p: Point3) -> Point3 {
    pose.transform(p)
}

// ==== CAMERA ====

/// Pinhole camera intrinsics plus sensor extent in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidCamera("focal lengths must be positive"));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidCamera("image extent must be positive"));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(GeometryError::InvalidCamera("principal point must lie inside the image"));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Projects a camera-frame point; fails on z <= 0.
    pub fn project(&self, p: Point3) -> Result<Point2, GeometryError> {
        if p.z <= 0.0 {
            return Err(GeometryError::NonPositiveDepth { z: p.z });
        }
        Ok(Point2::new(
            self.cx + self.fx * p.x / p.z,
            self.cy + self.fy * p.y / p.z,
        ))
    }

    /// Camera-frame point on the viewing ray of `px` at the given depth.
    pub fn backproject(&self, px: Point2, depth: f64) -> Result<Point3, GeometryError> {
        if depth <= 0.0 {
            return Err(GeometryError::NonPositiveDepth { z: depth });
        }
        Ok(Point3::new(
            (px.x - self.cx) / self.fx * depth,
            (px.y - self.cy) / self.fy * depth,
            depth,
        ))
    }

    /// Unnormalized viewing-ray direction of a pixel (z component 1).
    pub fn ray(&self, px: Point2) -> Vector3<f64> {
        Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, px: Point2) -> bool {
        (0.0..self.width as f64).contains(&px.x) && (0.0..self.height as f64).contains(&px.y)
    }
}

/// Projects a camera-frame point through `cam`; method form is equivalent.
pub fn project(cam: &CameraModel, p: Point3) -> Result<Point2, GeometryError> {
    cam.project(p)
}

// ==== CROSS-RATIO ====

fn cross_ratio_from_distances(dists: [[f64; 4]; 4]) -> Result<f64, GeometryError> {
    for i in 0..4 {
        for j in (i + 1)..4 {
            if dists[i][j] * dists[i][j] < COINCIDENCE_EPS_SQ {
                return Err(GeometryError::DegenerateConfiguration(
                    "cross-ratio points must be pairwise distinct",
                ));
            }
        }
    }
    Ok((dists[0][2] / dists[0][3]) / (dists[1][2] / dists[1][3]))
}

/// Cross-ratio of four ordered planar points:
/// `(d13 / d14) / (d23 / d24)` with Euclidean distances.
///
/// For collinear points this is the classical projective invariant.
pub fn cross_ratio_2d(p: &[Point2; 4]) -> Result<f64, GeometryError> {
    let mut d = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            d[i][j] = p[i].dist(p[j]);
        }
    }
    cross_ratio_from_distances(d)
}

/// Cross-ratio of four ordered 3D points; same form as [`cross_ratio_2d`].
pub fn cross_ratio_3d(p: &[Point3; 4]) -> Result<f64, GeometryError> {
    let mut d = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            d[i][j] = p[i].dist(p[j]);
        }
    }
    cross_ratio_from_distances(d)
}

// ==== TRIANGULATION ====

/// Triangulates one point from a matched pixel pair seen by two cameras.
///
/// `left_to_right` maps left-camera-frame points into the right camera
/// frame. The result is the midpoint of the common perpendicular of the
/// two viewing rays, expressed in the left camera frame.
pub fn triangulate_two_view(
    cam_left: &CameraModel,
    cam_right: &CameraModel,
    left_to_right: &RigidPose,
    uv_left: Point2,
    uv_right: Point2,
) -> Result<Point3, GeometryError> {
    let d1 = cam_left.ray(uv_left);
    let right_to_left = left_to_right.inverse();
    // Right camera center and ray direction expressed in the left frame.
    let c2 = right_to_left.translation().to_vector();
    let d2 = right_to_left.rotation() * cam_right.ray(uv_right);

    let sin_angle = d1.cross(&d2).norm() / (d1.norm() * d2.norm());
    if sin_angle < PARALLEL_RAY_EPS {
        return Err(GeometryError::ParallelRays);
    }

    // Closest points: argmin_{s,u} | (0 + s d1) - (c2 + u d2) |^2.
    let a = Matrix2::new(d1.dot(&d1), -d1.dot(&d2), d1.dot(&d2), -d2.dot(&d2));
    let b = Vector2::new(c2.dot(&d1), c2.dot(&d2));
    let su = a.lu().solve(&b).ok_or(GeometryError::ParallelRays)?;
    let p1 = d1 * su.x;
    let p2 = c2 + d2 * su.y;
    Ok(Point3::from_vector((p1 + p2) * 0.5))
}

// ==== QUADRATIC FIT ====

/// Least-squares fit of `y = a x^2 + b x + c`; returns `[a, b, c]`.
///
/// Needs at least three samples with three distinct abscissae.
pub fn fit_quadratic(xs: &[f64], ys: &[f64]) -> Result<[f64; 3], GeometryError> {
    assert_eq!(xs.len(), ys.len(), "sample vectors must have equal length");
    if xs.len() < 3 {
        return Err(GeometryError::InsufficientPoints { needed: 3, got: xs.len() });
    }
    let mut distinct: Vec<f64> = Vec::new();
    for &x in xs {
        if !distinct.iter().any(|&d| d == x) {
            distinct.push(x);
            if distinct.len() == 3 {
                break;
            }
        }
    }
    if distinct.len() < 3 {
        return Err(GeometryError::SingularSystem);
    }

    let mut m = Matrix3::zeros();
    let mut rhs = Vector3::zeros();
    for (&x, &y) in xs.iter().zip(ys) {
        let v = Vector3::new(x * x, x, 1.0);
        m += v * v.transpose();
        rhs += v * y;
    }
    let sol = m.lu().solve(&rhs).ok_or(GeometryError::SingularSystem)?;
    Ok([sol.x, sol.y, sol.z])
}
