//! Stereo extension of the mono pipeline.
//!
//! The mono estimate is cheap but its depth error grows quadratically
//! with range. When a second calibrated camera is available, the mono
//! position projects the detection box into that view (so no detector
//! runs on the right image), and the regressed keypoints of both views
//! form seven index-matched correspondences. Triangulating those and
//! taking a componentwise median gives a position estimate that is
//! robust to a few bad keypoints without any feature matching.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::cone::{camera_facing_pose, canonical_keypoints, ConeGeometry, KeypointFrame, KeypointSet};
use crate::geometry::{
    triangulate_two_view, CameraModel, GeometryError, Point3, RigidPose,
};
use crate::synth::BBox;

/// Fewest surviving keypoint pairs the median aggregation accepts.
pub const MIN_STEREO_PAIRS: usize = 3;

#[derive(Debug, Error)]
pub enum StereoError {
    #[error("invalid stereo rig: {0}")]
    InvalidRig(&'static str),
    #[error("position sits behind the right camera (z = {z:.3} m)")]
    BehindRightCamera { z: f64 },
    #[error("propagated box falls entirely outside the right image")]
    OutOfRightFrame,
    #[error("only {got} keypoint pairs triangulated, need {MIN_STEREO_PAIRS}")]
    InsufficientPairs { got: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A calibrated camera pair.
///
/// `left_to_right` maps left-camera-frame points into the right camera
/// frame; the magnitude of its translation is the rig baseline. All
/// stereo outputs are expressed in the left frame, matching the mono
/// pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoRig {
    pub left: CameraModel,
    pub right: CameraModel,
    left_to_right: RigidPose,
}

impl StereoRig {
    pub fn new(
        left: CameraModel,
        right: CameraModel,
        left_to_right: RigidPose,
    ) -> Result<Self, StereoError> {
        if !(left_to_right.translation().to_vector().norm() > 0.0) {
            return Err(StereoError::InvalidRig("baseline must be nonzero"));
        }
        Ok(Self { left, right, left_to_right })
    }

    /// Two identical cameras with the right one displaced `baseline`
    /// meters along the left camera's +x axis (the usual forward-facing
    /// horizontal rig).
    pub fn pure_x_baseline(cam: CameraModel, baseline: f64) -> Result<Self, StereoError> {
        if !(baseline > 0.0) {
            return Err(StereoError::InvalidRig("baseline must be positive"));
        }
        let pose = RigidPose::new(Matrix3::identity(), Vector3::new(-baseline, 0.0, 0.0))
            .expect("identity is a rotation");
        Self::new(cam, cam, pose)
    }

    pub fn left_to_right(&self) -> &RigidPose {
        &self.left_to_right
    }

    /// Distance between the two camera centers, meters.
    pub fn baseline(&self) -> f64 {
        self.left_to_right.translation().to_vector().norm()
    }
}

/// Predicts the right-frame detection box implied by a left-frame mono
/// position estimate, so the right image needs no detector pass.
///
/// The cone's canonical keypoints are posed at `mono_position` facing
/// the left camera (the mono solver's assumption), carried into the
/// right frame and projected; the tight projection is expanded by the
/// margin `bbox_left` carries relative to its own tight projection and
/// clipped at the right image border. A truncated `bbox_left`
/// underestimates that margin; `truncated` on the result reports
/// right-border clipping only.
pub fn propagate_bbox(
    rig: &StereoRig,
    mono_position: Point3,
    bbox_left: &BBox,
    g: &ConeGeometry,
) -> Result<BBox, StereoError> {
    let right_position = rig.left_to_right.transform(mono_position);
    if right_position.z <= 0.0 {
        return Err(StereoError::BehindRightCamera { z: right_position.z });
    }

    let pose = camera_facing_pose(mono_position);
    let mut left_ext = Extent::default();
    let mut right_ext = Extent::default();
    for kp in canonical_keypoints(g) {
        let p = pose.transform(kp);
        left_ext.add(rig.left.project(p)?);
        let pr = rig.left_to_right.transform(p);
        if pr.z <= 0.0 {
            return Err(StereoError::BehindRightCamera { z: pr.z });
        }
        right_ext.add(rig.right.project(pr).expect("depth checked above"));
    }

    // Margins are recovered per axis so the propagated box mirrors
    // whatever detector padding the left box came with.
    let margin_x = (0.5 * (bbox_left.w / left_ext.width() - 1.0)).max(0.0);
    let margin_y = (0.5 * (bbox_left.h / left_ext.height() - 1.0)).max(0.0);

    let (w, h) = (right_ext.width(), right_ext.height());
    let x0 = right_ext.min_x - margin_x * w;
    let x1 = right_ext.max_x + margin_x * w;
    let y0 = right_ext.min_y - margin_y * h;
    let y1 = right_ext.max_y + margin_y * h;

    let (img_w, img_h) = (rig.right.width as f64, rig.right.height as f64);
    if x1 <= 0.0 || x0 >= img_w || y1 <= 0.0 || y0 >= img_h {
        return Err(StereoError::OutOfRightFrame);
    }
    let cx0 = x0.max(0.0);
    let cy0 = y0.max(0.0);
    let cx1 = x1.min(img_w);
    let cy1 = y1.min(img_h);
    Ok(BBox {
        x: cx0,
        y: cy0,
        w: cx1 - cx0,
        h: cy1 - cy0,
        truncated: cx0 != x0 || cy0 != y0 || cx1 != x1 || cy1 != y1,
    })
}

#[derive(Debug)]
struct Extent {
    min_x: f64,
    max_x: f64,
    min_y: f64,
    max_y: f64,
}

impl Default for Extent {
    fn default() -> Self {
        Self {
            min_x: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            min_y: f64::INFINITY,
            max_y: f64::NEG_INFINITY,
        }
    }
}

impl Extent {
    fn add(&mut self, p: crate::geometry::Point2) {
        self.min_x = self.min_x.min(p.x);
        self.max_x = self.max_x.max(p.x);
        self.min_y = self.min_y.min(p.y);
        self.max_y = self.max_y.max(p.y);
    }

    fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    fn height(&self) -> f64 {
        self.max_y - self.min_y
    }
}

/// Refines a cone position by triangulating the index-matched keypoints
/// of the two views.
///
/// Each triangulated keypoint is pulled back to a base-position estimate
/// by subtracting its canonical offset under the left-facing rotation,
/// and the componentwise median of those estimates is returned in the
/// left camera frame. Pairs with parallel viewing rays (no disparity)
/// are dropped; fewer than [`MIN_STEREO_PAIRS`] survivors is an error.
///
/// Both sets must be full-image keypoints of the same physical cone,
/// index-matched by construction of the regressor output.
pub fn stereo_refine(
    rig: &StereoRig,
    kps_left: &KeypointSet,
    kps_right: &KeypointSet,
    g: &ConeGeometry,
) -> Result<Point3, StereoError> {
    assert_eq!(kps_left.frame, KeypointFrame::Image, "stereo_refine needs image-frame keypoints");
    assert_eq!(kps_right.frame, KeypointFrame::Image, "stereo_refine needs image-frame keypoints");

    // Facing rotation alone; the unknown translation is what we solve for.
    let facing = camera_facing_pose(Point3::new(0.0, 0.0, 0.0));
    let model = canonical_keypoints(g);

    let mut xs = Vec::with_capacity(7);
    let mut ys = Vec::with_capacity(7);
    let mut zs = Vec::with_capacity(7);
    for i in 0..7 {
        let p = match triangulate_two_view(
            &rig.left,
            &rig.right,
            &rig.left_to_right,
            kps_left.points[i],
            kps_right.points[i],
        ) {
            Ok(p) => p,
            Err(GeometryError::ParallelRays) => continue,
            Err(e) => return Err(e.into()),
        };
        let offset = facing.transform(model[i]);
        xs.push(p.x - offset.x);
        ys.push(p.y - offset.y);
        zs.push(p.z - offset.z);
    }
    if xs.len() < MIN_STEREO_PAIRS {
        return Err(StereoError::InsufficientPairs { got: xs.len() });
    }
    Ok(Point3::new(median(&mut xs), median(&mut ys), median(&mut zs)))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("triangulated coordinates are finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
