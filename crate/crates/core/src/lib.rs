//! Monocular 3D cone position estimation.
//!
//! The crate regresses seven canonical keypoints from a cone detection
//! patch, regularized by the arms' projective cross-ratio, and recovers
//! the cone's metric position with a planar-aware iterative PnP solver.
//! A seeded synthetic world (scene sampling, procedural patch renderer,
//! detector simulation) provides ground truth for end-to-end closure
//! tests, and a stereo extension propagates detections to a second view.

pub mod cone;
pub mod config;
pub mod experiments;
pub mod pnp;
pub mod geometry;
pub mod pipeline;
pub mod regressor;
pub mod stereo;
pub mod synth;

pub use config::{ConfigError, RunConfig};
pub use cone::{
    camera_facing_pose, canonical_keypoints, default_t3, model_cross_ratio, ColorClass,
    ConeGeometry, ConeModelError, KeypointFrame, KeypointSet, CR_3D, LEFT_ARM, RIGHT_ARM,
};
pub use experiments::{
    exp_bbox_perturbation, exp_depth_accuracy, exp_kp_variance, kpvar_placements,
    observations_csv, sample_variance, spearman_rho, stereo_eval, CsvReport, BBOX_LEVELS,
};
pub use geometry::{
    cross_ratio_2d, cross_ratio_3d, fit_quadratic, project, transform, triangulate_two_view,
    CameraModel, GeometryError, Point2, Point3, RigidPose,
};
pub use pipeline::{
    estimate_frame, jitter_keypoints, ConeObservation, FrameEstimate, PipelineError, Predictor,
    SkipReason, SkippedCone, Source,
};
pub use pnp::{
    depth_init, ransac_pnp, refine_lm, reprojection_error, PnPResult, PnpError, RansacConfig,
};
pub use regressor::{
    arm_cross_ratio, canonical_patch_layout, conv_output_shape, evaluate_predictions,
    keypoint_loss, keypoint_loss_and_gradient, keypoint_loss_gradient, load_model, save_model,
    EvalMetrics, NetConfig, RegressorError, RegressorNet, RegressorNetT, TrainConfig,
    LOSS_DISTANCE_EPS,
};
pub use stereo::{propagate_bbox, stereo_refine, StereoError, StereoRig, MIN_STEREO_PAIRS};
pub use synth::{
    generate_dataset, generate_scene, perturb_bbox, project_cone_keypoints, read_dataset,
    render_patch, render_patch_augmented, render_patch_in_bbox, simulate_detection, write_dataset,
    BBox, NoiseParams, PatchImage, PatchSample, PlannedCone, ScenePlan, SynthError,
    DEFAULT_MARGIN_FRAC, MIN_APPARENT_HEIGHT_PX, PATCH_SIZE,
};
