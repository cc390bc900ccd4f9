//! Canonical cone keypoint model.
//!
//! A cone is modeled by seven coplanar keypoints in its own frame: the
//! frame origin sits at the base center, y points up along the cone
//! axis, and all keypoints lie in the z = 0 plane. Index order:
//!
//! ```text
//! 0: apex
//! 1, 2: left-arm stripe interfaces (upper, lower)
//! 3: left base corner
//! 4, 5: right-arm stripe interfaces (upper, lower)
//! 6: right base corner
//! ```
//!
//! The stripe interfaces sit at fractions `t2` and `t3` of the way from
//! the apex to each base corner, so any four points of one arm are
//! collinear and carry a fixed cross-ratio that survives projection.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point2, Point3, RigidPose};

/// Cross-ratio of the four arm keypoints of the reference cone model.
pub const CR_3D: f64 = 1.3940842428872968;

pub const DEFAULT_HEIGHT: f64 = 0.325;
pub const DEFAULT_BASE_HALFWIDTH: f64 = 0.114;
pub const DEFAULT_T2: f64 = 0.4;

/// Arm fraction `t3` that realizes [`CR_3D`] together with [`DEFAULT_T2`]:
/// solving cr = t3 (1 - t2) / (t3 - t2) for t3 gives t3 = t2 cr / (cr - (1 - t2)).
pub fn default_t3() -> f64 {
    DEFAULT_T2 * CR_3D / (CR_3D - (1.0 - DEFAULT_T2))
}

#[derive(Debug, Error, PartialEq)]
pub enum ConeModelError {
    #[error("cone geometry is invalid: {0}")]
    InvalidGeometry(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorClass {
    Blue,
    Yellow,
    Orange,
}

impl ColorClass {
    pub fn id(self) -> u8 {
        match self {
            ColorClass::Blue => 0,
            ColorClass::Yellow => 1,
            ColorClass::Orange => 2,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(ColorClass::Blue),
            1 => Some(ColorClass::Yellow),
            2 => Some(ColorClass::Orange),
            _ => None,
        }
    }
}

/// Physical cone dimensions plus the arm split fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeGeometry {
    pub height: f64,
    pub base_halfwidth: f64,
    pub t2: f64,
    pub t3: f64,
    pub color_class: ColorClass,
}

impl ConeGeometry {
    pub fn new(
        height: f64,
        base_halfwidth: f64,
        t2: f64,
        t3: f64,
        color_class: ColorClass,
    ) -> Result<Self, ConeModelError> {
        if !(height > 0.0) {
            return Err(ConeModelError::InvalidGeometry("height must be positive"));
        }
        if !(base_halfwidth > 0.0) {
            return Err(ConeModelError::InvalidGeometry("base halfwidth must be positive"));
        }
        if !(0.0 < t2 && t2 < t3 && t3 < 1.0) {
            return Err(ConeModelError::InvalidGeometry("need 0 < t2 < t3 < 1"));
        }
        Ok(Self { height, base_halfwidth, t2, t3, color_class })
    }

    pub fn with_color(mut self, color_class: ColorClass) -> Self {
        self.color_class = color_class;
        self
    }
}

impl Default for ConeGeometry {
    fn default() -> Self {
        Self {
            height: DEFAULT_HEIGHT,
            base_halfwidth: DEFAULT_BASE_HALFWIDTH,
            t2: DEFAULT_T2,
            t3: default_t3(),
            color_class: ColorClass::Blue,
        }
    }
}

/// Keypoint indices of the left arm (apex, upper, lower, base corner).
pub const LEFT_ARM: [usize; 4] = [0, 1, 2, 3];
/// Keypoint indices of the right arm (apex, upper, lower, base corner).
pub const RIGHT_ARM: [usize; 4] = [0, 4, 5, 6];

/// The seven model keypoints in the cone frame (z = 0 plane).
pub fn canonical_keypoints(g: &ConeGeometry) -> [Point3; 7] {
    let apex = Point3::new(0.0, g.height, 0.0);
    let arm = |corner_x: f64, t: f64| {
        Point3::new(
            apex.x + t * (corner_x - apex.x),
            apex.y + t * (0.0 - apex.y),
            0.0,
        )
    };
    let l = -g.base_halfwidth;
    let r = g.base_halfwidth;
    [
        apex,
        arm(l, g.t2),
        arm(l, g.t3),
        Point3::new(l, 0.0, 0.0),
        arm(r, g.t2),
        arm(r, g.t3),
        Point3::new(r, 0.0, 0.0),
    ]
}

/// Cross-ratio of each arm's four keypoints, in closed form.
///
/// With the arm parameterized by t in {0, t2, t3, 1}, the distances
/// reduce to parameter differences and the ratio is
/// `t3 (1 - t2) / (t3 - t2)`, independent of the cone's size.
pub fn model_cross_ratio(g: &ConeGeometry) -> f64 {
    g.t3 * (1.0 - g.t2) / (g.t3 - g.t2)
}

/// Pose placing the cone model at `position` (base center, camera frame)
/// facing the camera: the keypoint plane stays fronto-parallel and the
/// model's up axis maps to image up (negative pixel y).
pub fn camera_facing_pose(position: Point3) -> RigidPose {
    let r = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, -1.0, -1.0));
    RigidPose::new(r, position.to_vector()).expect("diag(1,-1,-1) is a rotation")
}

/// Which pixel frame a [`KeypointSet`] lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeypointFrame {
    /// Full-image pixels.
    Image,
    /// Crop-local pixels of a resampled detection patch. Coordinates
    /// usually fall in [0, patch_size) but may leave that range for
    /// truncated cones; they are never clipped.
    Patch,
}

/// Ordered set of the seven projected keypoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointSet {
    pub points: [Point2; 7],
    pub frame: KeypointFrame,
}

impl KeypointSet {
    pub fn new(points: [Point2; 7], frame: KeypointFrame) -> Self {
        Self { points, frame }
    }

    /// Flattens to `[x1, y1, x2, y2, ..., x7, y7]`, the regression layout.
    pub fn to_vec14(&self) -> [f64; 14] {
        let mut v = [0.0; 14];
        for (i, p) in self.points.iter().enumerate() {
            v[2 * i] = p.x;
            v[2 * i + 1] = p.y;
        }
        v
    }

    pub fn from_vec14(v: &[f64; 14], frame: KeypointFrame) -> Self {
        let mut points = [Point2::default(); 7];
        for (i, p) in points.iter_mut().enumerate() {
            *p = Point2::new(v[2 * i], v[2 * i + 1]);
        }
        Self { points, frame }
    }

    pub fn arm(&self, indices: [usize; 4]) -> [Point2; 4] {
        indices.map(|i| self.points[i])
    }

    pub fn apex(&self) -> Point2 {
        self.points[0]
    }

    /// Midpoint of the two base corners.
    pub fn base_midpoint(&self) -> Point2 {
        let l = self.points[3];
        let r = self.points[6];
        Point2::new(0.5 * (l.x + r.x), 0.5 * (l.y + r.y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{cross_ratio_3d, CameraModel};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn canonical_corners_and_apex() {
        let kp = canonical_keypoints(&ConeGeometry::default());
        assert_eq!(kp[0], Point3::new(0.0, 0.325, 0.0));
        assert_eq!(kp[3], Point3::new(-0.114, 0.0, 0.0));
        assert_eq!(kp[6], Point3::new(0.114, 0.0, 0.0));
    }

    #[test]
    fn stripe_interfaces_interpolate_the_arm() {
        let g = ConeGeometry::default();
        let kp = canonical_keypoints(&g);
        let apex = kp[0];
        let base = kp[3];
        let expect = Point3::new(
            apex.x + g.t2 * (base.x - apex.x),
            apex.y + g.t2 * (base.y - apex.y),
            0.0,
        );
        assert!(kp[1].dist(expect) < 1e-12);
    }

    #[test]
    fn arms_mirror_exactly() {
        let kp = canonical_keypoints(&ConeGeometry::default());
        for (l, r) in [(1usize, 4usize), (2, 5), (3, 6)] {
            assert_eq!(kp[l].x, -kp[r].x);
            assert_eq!(kp[l].y, kp[r].y);
        }
    }

    #[test]
    fn keypoints_are_coplanar() {
        let kp = canonical_keypoints(&ConeGeometry::default());
        assert!(kp.iter().all(|p| p.z == 0.0));
    }

    #[test]
    fn reference_cross_ratio_value() {
        let cr = model_cross_ratio(&ConeGeometry::default());
        assert!((cr - CR_3D).abs() < 1e-6);
        // t3 is solved from the constant, so the match is tight.
        assert!((cr - CR_3D).abs() < 1e-12);
    }

    #[test]
    fn equal_spacing_gives_four_thirds() {
        let g = ConeGeometry::new(0.325, 0.114, 1.0 / 3.0, 2.0 / 3.0, ColorClass::Blue).unwrap();
        assert_relative_eq!(model_cross_ratio(&g), 4.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_matches_distance_definition() {
        let g = ConeGeometry::default();
        let kp = canonical_keypoints(&g);
        let arm = [kp[0], kp[1], kp[2], kp[3]];
        assert_relative_eq!(
            cross_ratio_3d(&arm).unwrap(),
            model_cross_ratio(&g),
            epsilon = 1e-12
        );
        let right = [kp[0], kp[4], kp[5], kp[6]];
        assert_relative_eq!(
            cross_ratio_3d(&right).unwrap(),
            model_cross_ratio(&g),
            epsilon = 1e-12
        );
    }

    #[test]
    fn geometry_validation() {
        assert!(ConeGeometry::new(0.0, 0.1, 0.4, 0.7, ColorClass::Blue).is_err());
        assert!(ConeGeometry::new(0.3, -0.1, 0.4, 0.7, ColorClass::Blue).is_err());
        assert!(ConeGeometry::new(0.3, 0.1, 0.7, 0.4, ColorClass::Blue).is_err());
        assert!(ConeGeometry::new(0.3, 0.1, 0.4, 1.0, ColorClass::Blue).is_err());
    }

    #[test]
    fn camera_facing_pose_puts_apex_above_base() {
        let cam = CameraModel::new(600.0, 600.0, 800.0, 400.0, 1600, 800).unwrap();
        let pose = camera_facing_pose(Point3::new(0.0, 0.4, 6.0));
        let kp = canonical_keypoints(&ConeGeometry::default());
        let apex = cam.project(pose.transform(kp[0])).unwrap();
        let base = cam.project(pose.transform(kp[3])).unwrap();
        assert!(apex.y < base.y, "apex {apex:?} must be above base {base:?} in image");
        // Fronto-parallel: every keypoint keeps the same camera depth.
        for p in kp {
            assert_relative_eq!(pose.transform(p).z, 6.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn vec14_roundtrip() {
        let kp = KeypointSet::new(
            [
                Point2::new(40.0, 8.0),
                Point2::new(30.0, 30.0),
                Point2::new(22.0, 50.0),
                Point2::new(12.0, 72.0),
                Point2::new(50.0, 30.0),
                Point2::new(58.0, 50.0),
                Point2::new(68.0, 72.0),
            ],
            KeypointFrame::Patch,
        );
        let v = kp.to_vec14();
        assert_eq!(v[0], 40.0);
        assert_eq!(v[13], 72.0);
        assert_eq!(KeypointSet::from_vec14(&v, KeypointFrame::Patch), kp);
    }

    proptest! {
        #[test]
        fn prop_cross_ratio_ignores_scale(
            h in 0.05..2.0f64,
            w in 0.02..1.0f64,
            t2 in 0.05..0.6f64,
            dt in 0.05..0.39f64,
            scale in 0.1..10.0f64,
        ) {
            let t3 = t2 + dt;
            prop_assume!(t3 < 1.0);
            let a = ConeGeometry::new(h, w, t2, t3, ColorClass::Blue).unwrap();
            let b = ConeGeometry::new(h * scale, w * scale, t2, t3, ColorClass::Blue).unwrap();
            let (ca, cb) = (model_cross_ratio(&a), model_cross_ratio(&b));
            prop_assert!((ca - cb).abs() < 1e-12 * ca.abs().max(1.0));
            // Distance-based route agrees for both sizes.
            let kp = canonical_keypoints(&b);
            let cr = cross_ratio_3d(&[kp[0], kp[1], kp[2], kp[3]]).unwrap();
            prop_assert!((cr - cb).abs() < 1e-9 * cb.abs().max(1.0));
        }
    }
}
