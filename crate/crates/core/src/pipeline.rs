//! Per-frame orchestration: detect, regress, solve, report.
//!
//! One call turns a planned scene into metric cone observations, running
//! each cone through detection simulation, keypoint prediction and the
//! PnP solver. Cones failing any stage are reported with a reason, never
//! silently dropped and never fabricated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::cone::{
    camera_facing_pose, canonical_keypoints, ColorClass, ConeGeometry, KeypointFrame, KeypointSet,
};
use crate::config::{ConfigError, RunConfig};
use crate::geometry::{CameraModel, Point2, Point3};
use crate::pnp::{depth_init, ransac_pnp, PnpError, RansacConfig};
use crate::regressor::{RegressorError, RegressorNet};
use crate::synth::{
    project_cone_keypoints, render_patch_in_bbox, simulate_detection, NoiseParams, ScenePlan,
    SynthError, MIN_APPARENT_HEIGHT_PX,
};

/// Seed depth for the centroid-ray pose used when depth_init rejects a
/// keypoint set. Mid working range; the per-subset initialization in
/// the solver makes the exact value uncritical.
const FALLBACK_INIT_Z: f64 = 10.0;

/// Keypoint source the pipeline runs on.
pub enum Predictor {
    /// Ground-truth annotations, jittered by the configured keypoint
    /// sigma. Substitutes for the net in closure tests and noise
    /// studies; with sigma zero the loop is exact.
    Oracle,
    Net(RegressorNet),
}

/// Which estimator produced an observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Mono,
    Stereo,
}

impl Source {
    pub fn code(&self) -> &'static str {
        match self {
            Source::Mono => "mono",
            Source::Stereo => "stereo",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeObservation {
    /// Index of the cone within its scene plan.
    pub cone_index: usize,
    /// Cone base center, left-camera frame, meters.
    pub position: Point3,
    pub color_class: ColorClass,
    /// Mean pixel reprojection error over the fitted points.
    pub mean_reproj_error: f64,
    pub inlier_count: usize,
    pub source: Source,
}

/// Machine-readable reason a cone yielded no observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    /// Nothing of the cone projects into the image.
    OutOfFrame,
    /// Apparent height below the renderer's minimum.
    TooSmall,
    /// Keypoints could not seed a depth estimate.
    DegenerateKeypoints,
    /// Solver left the cone behind the camera.
    BehindCamera,
    /// No keypoint subset reached the inlier minimum.
    NoConsensus,
}

impl SkipReason {
    /// Stable token used in `skipped.csv`.
    pub fn code(&self) -> &'static str {
        match self {
            SkipReason::OutOfFrame => "out_of_frame",
            SkipReason::TooSmall => "too_small",
            SkipReason::DegenerateKeypoints => "degenerate_keypoints",
            SkipReason::BehindCamera => "behind_camera",
            SkipReason::NoConsensus => "no_consensus",
        }
    }

    pub(crate) fn from_synth(e: &SynthError) -> Self {
        match e {
            SynthError::TooSmall { .. } => SkipReason::TooSmall,
            _ => SkipReason::OutOfFrame,
        }
    }

    fn from_pnp(e: &PnpError) -> Self {
        match e {
            PnpError::BehindCamera => SkipReason::BehindCamera,
            PnpError::NoConsensus { .. } => SkipReason::NoConsensus,
            PnpError::DegenerateKeypoints(_) | PnpError::TooFewCorrespondences { .. } => {
                SkipReason::DegenerateKeypoints
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkippedCone {
    pub cone_index: usize,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameEstimate {
    pub observations: Vec<ConeObservation>,
    pub skipped: Vec<SkippedCone>,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("scene contains no cones")]
    EmptyScene,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("regressor failure: {0}")]
    Regressor(#[from] RegressorError),
}

/// Runs the mono pipeline over every cone of a scene.
///
/// Deterministic in (scene, predictor, config): per-cone noise streams
/// are derived from the config seed and the cone index, so removing or
/// skipping one cone does not shift its neighbours' draws.
pub fn estimate_frame(
    scene: &ScenePlan,
    predictor: &Predictor,
    cfg: &RunConfig,
) -> Result<FrameEstimate, PipelineError> {
    if scene.cones.is_empty() {
        return Err(PipelineError::EmptyScene);
    }
    let noise = cfg.noise_params();
    let ransac = cfg.ransac_config();

    let mut observations = Vec::new();
    let mut skipped = Vec::new();
    for (i, cone) in scene.cones.iter().enumerate() {
        let sub_seed = cfg
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(i as u64);
        match estimate_one(
            &scene.cam,
            cone.position,
            &cone.geometry,
            predictor,
            &noise,
            &ransac,
            cfg.experiment.margin_frac,
            sub_seed,
        )? {
            Ok(mut obs) => {
                obs.cone_index = i;
                observations.push(obs);
            }
            Err(reason) => skipped.push(SkippedCone { cone_index: i, reason }),
        }
    }
    Ok(FrameEstimate { observations, skipped })
}

/// Inner per-cone result: hard faults outer, per-cone skips inner.
type PerCone = Result<Result<ConeObservation, SkipReason>, PipelineError>;

#[allow(clippy::too_many_arguments)]
fn estimate_one(
    cam: &CameraModel,
    position: Point3,
    g: &ConeGeometry,
    predictor: &Predictor,
    noise: &NoiseParams,
    ransac: &RansacConfig,
    margin_frac: f64,
    seed: u64,
) -> PerCone {
    let bbox = match simulate_detection(cam, position, g, margin_frac) {
        Ok(b) => b,
        Err(e) => return Ok(Err(SkipReason::from_synth(&e))),
    };

    let kps = match predictor {
        Predictor::Oracle => {
            // Same visibility gate the renderer applies, so oracle and
            // net runs skip the same cones.
            if cam.fy * g.height / position.z < MIN_APPARENT_HEIGHT_PX {
                return Ok(Err(SkipReason::TooSmall));
            }
            let exact = match project_cone_keypoints(cam, position, g) {
                Ok(k) => k,
                Err(e) => return Ok(Err(SkipReason::from_synth(&e))),
            };
            jitter_keypoints(&exact, noise.keypoint_sigma_px, seed)
        }
        Predictor::Net(net) => {
            let sample = match render_patch_in_bbox(cam, position, g, noise, &bbox, seed) {
                Ok(s) => s,
                Err(e) => return Ok(Err(SkipReason::from_synth(&e))),
            };
            let out = net.forward(&sample.patch)?;
            let patch_kps = KeypointSet::from_vec14(&out, KeypointFrame::Patch);
            let mut points = [Point2::default(); 7];
            for (p, q) in points.iter_mut().zip(patch_kps.points) {
                *p = bbox.patch_to_image(q);
            }
            KeypointSet::new(points, KeypointFrame::Image)
        }
    };

    // A gross keypoint outlier can fold the apparent height and sink
    // depth_init; the subsets inside ransac_pnp re-derive their own
    // depth, so any finite pose on the centroid ray keeps such cones
    // solvable instead of skipped.
    let init = depth_init(cam, &kps, g).unwrap_or_else(|_| {
        let (cx, cy) = kps
            .points
            .iter()
            .fold((0.0, 0.0), |(x, y), p| (x + p.x / 7.0, y + p.y / 7.0));
        camera_facing_pose(Point3::new(
            (cx - cam.cx) / cam.fx * FALLBACK_INIT_Z,
            (cy - cam.cy) / cam.fy * FALLBACK_INIT_Z,
            FALLBACK_INIT_Z,
        ))
    });
    let model = canonical_keypoints(g);
    let result = match ransac_pnp(cam, &model, &kps.points, &init, ransac) {
        Ok(r) => r,
        Err(e) => return Ok(Err(SkipReason::from_pnp(&e))),
    };
    if result.position.z <= 0.0 {
        return Ok(Err(SkipReason::BehindCamera));
    }
    Ok(Ok(ConeObservation {
        cone_index: 0, // overwritten by the caller
        position: result.position,
        color_class: g.color_class,
        mean_reproj_error: result.mean_reproj_error,
        inlier_count: result.inlier_mask.iter().filter(|&&b| b).count(),
        source: Source::Mono,
    }))
}

/// Adds iid Gaussian pixel noise to every keypoint coordinate.
pub fn jitter_keypoints(kps: &KeypointSet, sigma_px: f64, seed: u64) -> KeypointSet {
    if sigma_px == 0.0 {
        return *kps;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c909);
    let normal = Normal::new(0.0, sigma_px).expect("sigma is finite and non-negative");
    let mut points = kps.points;
    for p in &mut points {
        p.x += normal.sample(&mut rng);
        p.y += normal.sample(&mut rng);
    }
    KeypointSet::new(points, kps.frame)
}
