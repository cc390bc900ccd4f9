//! Seeded synthetic world: scene sampling, detector simulation, bounding
//! box perturbation, and procedural patch rendering with exact keypoint
//! annotations. Every operation is a pure function of its seed.

mod dataset;
mod raster;

pub use dataset::{read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cone::{camera_facing_pose, canonical_keypoints, ColorClass, ConeGeometry, KeypointFrame, KeypointSet};
use crate::geometry::{CameraModel, Point2, Point3};

/// Detection patches are resampled to this square size.
pub const PATCH_SIZE: usize = 80;

/// Cones whose apparent height falls below this many image pixels are
/// too small to render a usable patch.
pub const MIN_APPARENT_HEIGHT_PX: f64 = 8.0;

/// Default bounding-box dilation applied per side by the simulated
/// detector, as a fraction of the tight keypoint extent.
pub const DEFAULT_MARGIN_FRAC: f64 = 0.15;

/// Fraction of the image width kept clear when sampling lateral cone
/// positions, so scene cones are not systematically half out of frame.
const FRUSTUM_MARGIN_FRAC: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no feasible cone placement at the near end of the range")]
    InfeasibleFrustum,
    #[error("cone too small to render: apparent height {apparent_px:.2} px < {needed_px} px")]
    TooSmall { apparent_px: f64, needed_px: f64 },
    #[error("cone projects entirely outside the image")]
    OutOfFrame,
    #[error("perturbed bounding box collapsed after {0} resampling attempts")]
    CollapsedBox(usize),
    #[error("dataset has no samples")]
    EmptyDataset,
    #[error("dataset placement rejected too often (last reason: {0})")]
    PlacementExhausted(String),
    #[error("corrupt dataset file: {0}")]
    CorruptFile(String),
    #[error("dataset version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ==== TYPES ====

/// Axis-aligned detection box in image pixels (top-left anchored).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    /// True when the simulated detector clipped the box at an image
    /// border. Not serialized; presentation metadata only.
    pub truncated: bool,
}

impl BBox {
    pub fn center(&self) -> Point2 {
        Point2::new(self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    /// Maps an image-frame point into patch-frame coordinates.
    pub fn image_to_patch(&self, p: Point2) -> Point2 {
        Point2::new(
            (p.x - self.x) * PATCH_SIZE as f64 / self.w,
            (p.y - self.y) * PATCH_SIZE as f64 / self.h,
        )
    }

    /// Maps a patch-frame point back into image-frame coordinates.
    pub fn patch_to_image(&self, p: Point2) -> Point2 {
        Point2::new(
            self.x + p.x * self.w / PATCH_SIZE as f64,
            self.y + p.y * self.h / PATCH_SIZE as f64,
        )
    }
}

/// One cone of a synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedCone {
    pub geometry: ConeGeometry,
    /// Base center in the camera frame.
    pub position: Point3,
}

/// A camera plus the cones in front of it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePlan {
    pub cam: CameraModel,
    pub cones: Vec<PlannedCone>,
}

/// Row-major HWC patch image with channel values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PatchImage {
    data: Vec<f32>,
}

impl PatchImage {
    pub fn new_filled(value: f32) -> Self {
        Self { data: vec![value; PATCH_SIZE * PATCH_SIZE * 3] }
    }

    pub(crate) fn from_data(data: Vec<f32>) -> Self {
        assert_eq!(data.len(), PATCH_SIZE * PATCH_SIZE * 3);
        Self { data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * PATCH_SIZE + x) * 3 + c]
    }

    #[inline]
    pub(crate) fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * PATCH_SIZE + x) * 3 + c] = v;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Bilinear sample of one channel at patch coordinates (pixel centers
    /// at half-integers); clamps to the border.
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> f32 {
        let n = PATCH_SIZE as f64;
        let fx = (x - 0.5).clamp(0.0, n - 1.0);
        let fy = (y - 0.5).clamp(0.0, n - 1.0);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(PATCH_SIZE - 1);
        let y1 = (y0 + 1).min(PATCH_SIZE - 1);
        let tx = (fx - x0 as f64) as f32;
        let ty = (fy - y0 as f64) as f32;
        let v00 = self.get(x0, y0, c);
        let v10 = self.get(x1, y0, c);
        let v01 = self.get(x0, y1, c);
        let v11 = self.get(x1, y1, c);
        (v00 * (1.0 - tx) + v10 * tx) * (1.0 - ty) + (v01 * (1.0 - tx) + v11 * tx) * ty
    }
}

/// A rendered detection crop with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub patch: PatchImage,
    /// Exact projected keypoints in the patch frame. May leave
    /// [0, PATCH_SIZE) for truncated cones; never clipped.
    pub keypoints: KeypointSet,
    /// The image-frame crop this patch was resampled from.
    pub bbox: BBox,
    /// True cone base center in the camera frame.
    pub position: Point3,
    pub color: ColorClass,
}

/// Photometric and augmentation noise parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    /// Per-patch Gaussian pixel noise sigma is drawn from [0, this].
    pub pixel_sigma_max: f64,
    /// Brightness factor drawn from [1 - j, 1 + j].
    pub brightness_jitter: f64,
    /// Saturation factor drawn from [1 - j, 1 + j].
    pub saturation_jitter: f64,
    /// Keypoint noise sigma (px) injected by the experiment harnesses.
    pub keypoint_sigma_px: f64,
    /// Augmentation rotation bound (degrees).
    pub augment_rotation_deg: f64,
    /// Augmentation scale factor drawn from [1 - s, 1 + s].
    pub augment_scale: f64,
    /// Augmentation translation bound (patch px).
    pub augment_translate_px: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            pixel_sigma_max: 0.05,
            brightness_jitter: 0.2,
            saturation_jitter: 0.2,
            keypoint_sigma_px: 1.0,
            augment_rotation_deg: 10.0,
            augment_scale: 0.1,
            augment_translate_px: 4.0,
        }
    }
}

// ==== SCENE GENERATION ====

/// Vertical frustum feasibility of a cone base at the given depth.
fn vertically_visible(cam: &CameraModel, g: &ConeGeometry, ground_y: f64, z: f64) -> bool {
    let v_base = cam.cy + cam.fy * ground_y / z;
    let v_apex = cam.cy + cam.fy * (ground_y - g.height) / z;
    v_base < cam.height as f64 && v_apex >= 0.0 && v_base > v_apex
}

fn lateral_extent(cam: &CameraModel, z: f64) -> (f64, f64) {
    let m = FRUSTUM_MARGIN_FRAC * cam.width as f64;
    let lo = (m - cam.cx) / cam.fx * z;
    let hi = ((cam.width as f64 - m) - cam.cx) / cam.fx * z;
    (lo, hi)
}

/// Samples `n_cones` cones with depth uniform in `[range_min, range_max]`
/// and lateral position uniform within the (margined) frustum at the
/// drawn depth. All cone bases sit at camera-frame height `ground_y`.
pub fn generate_scene(
    range_min: f64,
    range_max: f64,
    n_cones: usize,
    cam: &CameraModel,
    g: &ConeGeometry,
    ground_y: f64,
    seed: u64,
) -> Result<ScenePlan, SynthError> {
    assert!(range_min > 0.0 && range_max > range_min, "invalid depth range");
    assert!(n_cones >= 1, "a scene needs at least one cone");
    if !vertically_visible(cam, g, ground_y, range_min) {
        return Err(SynthError::InfeasibleFrustum);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cones = (0..n_cones)
        .map(|_| {
            let z = rng.random_range(range_min..=range_max);
            let (lo, hi) = lateral_extent(cam, z);
            let x = rng.random_range(lo..hi);
            let color = match rng.random_range(0..10u32) {
                0 => ColorClass::Orange,
                n if n < 5 => ColorClass::Blue,
                _ => ColorClass::Yellow,
            };
            PlannedCone {
                geometry: g.with_color(color),
                position: Point3::new(x, ground_y, z),
            }
        })
        .collect();
    Ok(ScenePlan { cam: *cam, cones })
}

// ==== DETECTOR SIMULATION ====

/// Tight bounding box of the projected keypoints, dilated by
/// `margin_frac` of its extent per side, then clipped at image borders
/// (recording truncation). Fails when nothing of the box lies in frame.
pub fn simulate_detection(
    cam: &CameraModel,
    position: Point3,
    g: &ConeGeometry,
    margin_frac: f64,
) -> Result<BBox, SynthError> {
    assert!(margin_frac >= 0.0, "margin must be non-negative");
    let pose = camera_facing_pose(position);
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for kp in canonical_keypoints(g) {
        let px = cam.project(pose.transform(kp)).map_err(|_| SynthError::OutOfFrame)?;
        min_x = min_x.min(px.x);
        max_x = max_x.max(px.x);
        min_y = min_y.min(px.y);
        max_y = max_y.max(px.y);
    }
    let w = max_x - min_x;
    let h = max_y - min_y;
    let (x0, x1) = (min_x - margin_frac * w, max_x + margin_frac * w);
    let (y0, y1) = (min_y - margin_frac * h, max_y + margin_frac * h);

    let (img_w, img_h) = (cam.width as f64, cam.height as f64);
    if x1 <= 0.0 || x0 >= img_w || y1 <= 0.0 || y0 >= img_h {
        return Err(SynthError::OutOfFrame);
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

/// Shifts each box edge independently by a seeded-uniform draw in
/// `[-pct, +pct]` of the box height (horizontal edges) or width
/// (vertical edges). Draw order: top, bottom, left, right. A collapsed
/// result is redrawn up to 10 times before failing.
pub fn perturb_bbox(bbox: &BBox, pct: f64, seed: u64) -> Result<BBox, SynthError> {
    assert!(pct >= 0.0, "perturbation fraction must be non-negative");
    const ATTEMPTS: usize = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..ATTEMPTS {
        let top = bbox.y + rng.random_range(-1.0..1.0) * pct * bbox.h;
        let bottom = bbox.y + bbox.h + rng.random_range(-1.0..1.0) * pct * bbox.h;
        let left = bbox.x + rng.random_range(-1.0..1.0) * pct * bbox.w;
        let right = bbox.x + bbox.w + rng.random_range(-1.0..1.0) * pct * bbox.w;
        if right - left > 0.0 && bottom - top > 0.0 {
            return Ok(BBox {
                x: left,
                y: top,
                w: right - left,
                h: bottom - top,
                truncated: bbox.truncated,
            });
        }
    }
    Err(SynthError::CollapsedBox(ATTEMPTS))
}

// ==== RENDERING ====

/// Projects the seven keypoints of a camera-facing cone into the image.
pub fn project_cone_keypoints(
    cam: &CameraModel,
    position: Point3,
    g: &ConeGeometry,
) -> Result<KeypointSet, SynthError> {
    let pose = camera_facing_pose(position);
    let mut pts = [Point2::default(); 7];
    for (i, kp) in canonical_keypoints(g).iter().enumerate() {
        pts[i] = cam
            .project(pose.transform(*kp))
            .map_err(|_| SynthError::OutOfFrame)?;
    }
    Ok(KeypointSet::new(pts, KeypointFrame::Image))
}

fn apparent_height_px(cam: &CameraModel, position: Point3, g: &ConeGeometry) -> Result<f64, SynthError> {
    let kps = project_cone_keypoints(cam, position, g)?;
    Ok(kps.base_midpoint().y - kps.apex().y)
}

/// Renders the detection patch for a cone using the simulated detector's
/// own bounding box. Annotated keypoints are the exact projections
/// mapped into the patch frame.
pub fn render_patch(
    cam: &CameraModel,
    position: Point3,
    g: &ConeGeometry,
    noise: &NoiseParams,
    margin_frac: f64,
    seed: u64,
) -> Result<PatchSample, SynthError> {
    let bbox = simulate_detection(cam, position, g, margin_frac)?;
    render_patch_in_bbox(cam, position, g, noise, &bbox, seed)
}

/// Renders the crop defined by an externally supplied bounding box (for
/// detector-noise studies the box may differ from the tight detection).
pub fn render_patch_in_bbox(
    cam: &CameraModel,
    position: Point3,
    g: &ConeGeometry,
    noise: &NoiseParams,
    bbox: &BBox,
    seed: u64,
) -> Result<PatchSample, SynthError> {
    let apparent = apparent_height_px(cam, position, g)?;
    if apparent < MIN_APPARENT_HEIGHT_PX {
        return Err(SynthError::TooSmall {
            apparent_px: apparent,
            needed_px: MIN_APPARENT_HEIGHT_PX,
        });
    }
    let image_kps = project_cone_keypoints(cam, position, g)?;
    let mut patch_pts = [Point2::default(); 7];
    for (i, p) in image_kps.points.iter().enumerate() {
        patch_pts[i] = bbox.image_to_patch(*p);
    }
    let patch = raster::rasterize_patch(
        &patch_pts,
        g,
        &raster::Affine2::identity(),
        noise,
        bbox,
        seed,
    );
    Ok(PatchSample {
        patch,
        keypoints: KeypointSet::new(patch_pts, KeypointFrame::Patch),
        bbox: *bbox,
        position,
        color: g.color_class,
    })
}

/// Renders like [`render_patch_in_bbox`] but composes a joint affine
/// augmentation (rotation, uniform scale, translation about the patch
/// center) into both the raster and the keypoint annotations. Used for
/// training data; augmented keypoints no longer map back to the image
/// through the bbox.
pub fn render_patch_augmented(
    cam: &CameraModel,
    position: Point3,
    g: &ConeGeometry,
    noise: &NoiseParams,
    margin_frac: f64,
    seed: u64,
    aug_seed: u64,
) -> Result<PatchSample, SynthError> {
    let bbox = simulate_detection(cam, position, g, margin_frac)?;
    let apparent = apparent_height_px(cam, position, g)?;
    if apparent < MIN_APPARENT_HEIGHT_PX {
        return Err(SynthError::TooSmall {
            apparent_px: apparent,
            needed_px: MIN_APPARENT_HEIGHT_PX,
        });
    }
    let image_kps = project_cone_keypoints(cam, position, g)?;
    let mut patch_pts = [Point2::default(); 7];
    for (i, p) in image_kps.points.iter().enumerate() {
        patch_pts[i] = bbox.image_to_patch(*p);
    }

    let mut aug_rng = ChaCha8Rng::seed_from_u64(aug_seed);
    let angle = aug_rng.random_range(-1.0..1.0) * noise.augment_rotation_deg.to_radians();
    let scale = 1.0 + aug_rng.random_range(-1.0..1.0) * noise.augment_scale;
    let tx = aug_rng.random_range(-1.0..1.0) * noise.augment_translate_px;
    let ty = aug_rng.random_range(-1.0..1.0) * noise.augment_translate_px;
    let aug = raster::Affine2::similarity_about_center(angle, scale, tx, ty);

    let patch = raster::rasterize_patch(&patch_pts, g, &aug, noise, &bbox, seed);
    let mut out_pts = [Point2::default(); 7];
    for (i, p) in patch_pts.iter().enumerate() {
        out_pts[i] = aug.apply(*p);
    }
    Ok(PatchSample {
        patch,
        keypoints: KeypointSet::new(out_pts, KeypointFrame::Patch),
        bbox,
        position,
        color: g.color_class,
    })
}

// ==== DATASET GENERATION ====

/// Renders `n` augmented samples with placements drawn like
/// [`generate_scene`]; placements that fail detection or rendering are
/// redrawn (bounded). Sample `i` of a given seed is stable regardless
/// of `n`.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    cam: &CameraModel,
    g: &ConeGeometry,
    n: usize,
    range_min: f64,
    range_max: f64,
    ground_y: f64,
    noise: &NoiseParams,
    margin_frac: f64,
    seed: u64,
) -> Result<Vec<PatchSample>, SynthError> {
    if n == 0 {
        return Err(SynthError::EmptyDataset);
    }
    if !vertically_visible(cam, g, ground_y, range_min) {
        return Err(SynthError::InfeasibleFrustum);
    }
    const MAX_ATTEMPTS: u64 = 64;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let mut last_err = String::new();
        let mut done = false;
        for attempt in 0..MAX_ATTEMPTS {
            // Separate derived streams so placement, photometrics and
            // augmentation cannot alias across samples.
            let sub = seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(i * MAX_ATTEMPTS + attempt);
            let mut rng = ChaCha8Rng::seed_from_u64(sub);
            let z = rng.random_range(range_min..=range_max);
            let (lo, hi) = lateral_extent(cam, z);
            let x = rng.random_range(lo..hi);
            let color = match rng.random_range(0..10u32) {
                0 => ColorClass::Orange,
                c if c < 5 => ColorClass::Blue,
                _ => ColorClass::Yellow,
            };
            let geometry = g.with_color(color);
            let position = Point3::new(x, ground_y, z);
            match render_patch_augmented(
                cam,
                position,
                &geometry,
                noise,
                margin_frac,
                sub ^ 0x5bf0_3635,
                sub ^ 0x94d0_49bb,
            ) {
                Ok(sample) => {
                    samples.push(sample);
                    done = true;
                    break;
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        if !done {
            return Err(SynthError::PlacementExhausted(last_err));
        }
    }
    Ok(samples)
}
