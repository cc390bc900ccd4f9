//! Run configuration: one TOML file drives every tool in the workspace.
//!
//! Parsing is strict in both directions: unknown keys are rejected (the
//! anti-typo stance) and missing keys are errors, so a config file always
//! states the full recipe it ran with. Defaults live in
//! `configs/default.toml`, which must stay equal to [`RunConfig::default`]
//! (a test enforces that).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cone::{ColorClass, ConeGeometry};
use crate::geometry::CameraModel;
use crate::pnp::RansacConfig;
use crate::regressor::{NetConfig, TrainConfig};
use crate::stereo::StereoRig;
use crate::synth::{NoiseParams, PATCH_SIZE};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config error in {path}:\n{message}")]
    Parse { path: String, message: String },
    #[error("invalid config value: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every derived RNG stream hangs off this.
    pub seed: u64,
    pub camera: CameraSection,
    pub cone: ConeSection,
    pub noise: NoiseSection,
    pub train: TrainSection,
    pub ransac: RansacSection,
    pub stereo: StereoSection,
    pub experiment: ExperimentSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSection {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConeSection {
    pub height: f64,
    pub base_halfwidth: f64,
    /// Stripe interface parameters along each arm, apex = 0, base = 1.
    pub t2: f64,
    pub t3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub pixel_sigma_max: f64,
    pub brightness_jitter: f64,
    pub saturation_jitter: f64,
    pub keypoint_sigma_px: f64,
    pub augment_rotation_deg: f64,
    pub augment_scale: f64,
    pub augment_translate_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub gamma: f64,
    /// Stem channel width; the residual blocks use 1x, 2x, 4x, 8x.
    pub base_width: usize,
    pub batchnorm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RansacSection {
    pub subset_size: usize,
    pub inlier_threshold_px: f64,
    pub min_inliers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StereoSection {
    /// Rig baseline in meters; the right camera sits this far along +x.
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub train_samples: usize,
    pub test_samples: usize,
    /// Depth range cones are sampled from, meters.
    pub range_min: f64,
    pub range_max: f64,
    /// Camera-frame height of the ground plane cone bases sit on.
    pub ground_y: f64,
    /// Detector box padding per side, as a fraction of the tight extent.
    pub margin_frac: f64,
    /// Cones per scene in `estimate` runs.
    pub scene_cones: usize,
    /// Depth sweep of the accuracy experiment, meters.
    pub sweep_min: f64,
    pub sweep_max: f64,
    pub sweep_step: f64,
    pub cones_per_bin: usize,
    /// Re-renders per (level, depth) cell of the box perturbation study.
    pub bbox_trials: usize,
    pub bbox_depths: Vec<f64>,
    /// PnP solves per noise axis and placement of the keypoint study.
    pub kpvar_trials: usize,
    pub stereo_trials: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            camera: CameraSection {
                fx: 600.0,
                fy: 600.0,
                cx: 800.0,
                cy: 400.0,
                width: 1600,
                height: 800,
            },
            cone: ConeSection {
                height: 0.325,
                base_halfwidth: 0.114,
                t2: 0.4,
                t3: 0.7022349355873856,
            },
            noise: NoiseSection {
                pixel_sigma_max: 0.05,
                brightness_jitter: 0.2,
                saturation_jitter: 0.2,
                keypoint_sigma_px: 1.0,
                augment_rotation_deg: 10.0,
                augment_scale: 0.1,
                augment_translate_px: 4.0,
            },
            train: TrainSection {
                learning_rate: 2e-3,
                momentum: 0.9,
                batch_size: 128,
                epochs: 60,
                lr_decay_epochs: vec![40, 50],
                lr_decay_factor: 0.1,
                gamma: 1.0,
                base_width: 8,
                batchnorm: true,
            },
            ransac: RansacSection {
                subset_size: 4,
                inlier_threshold_px: 2.0,
                min_inliers: 5,
            },
            stereo: StereoSection { baseline: 0.5 },
            experiment: ExperimentSection {
                train_samples: 2000,
                test_samples: 400,
                range_min: 4.0,
                range_max: 15.0,
                ground_y: 1.2,
                margin_frac: 0.15,
                scene_cones: 50,
                sweep_min: 4.0,
                sweep_max: 16.0,
                sweep_step: 0.5,
                cones_per_bin: 100,
                bbox_trials: 100,
                bbox_depths: vec![5.0, 10.0, 15.0],
                kpvar_trials: 500,
                stereo_trials: 500,
            },
        }
    }
}

impl RunConfig {
    /// Parses and fully validates a config file.
    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every cross-key invariant the type system cannot.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.camera_model()?;
        self.cone_geometry()?;
        self.stereo_rig()?;

        let t = &self.train;
        if !(t.learning_rate > 0.0) {
            return Err(ConfigError::Invalid("train.learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(ConfigError::Invalid("train.momentum must be in [0, 1)".into()));
        }
        if t.batch_size == 0 || t.epochs == 0 || t.base_width == 0 {
            return Err(ConfigError::Invalid(
                "train.batch_size, train.epochs and train.base_width must be at least 1".into(),
            ));
        }
        if !(t.lr_decay_factor > 0.0) {
            return Err(ConfigError::Invalid("train.lr_decay_factor must be positive".into()));
        }
        if t.gamma < 0.0 {
            return Err(ConfigError::Invalid("train.gamma must be non-negative".into()));
        }

        let r = &self.ransac;
        if r.subset_size < 4 || r.subset_size > 7 {
            return Err(ConfigError::Invalid("ransac.subset_size must be in [4, 7]".into()));
        }
        if !(r.inlier_threshold_px > 0.0) {
            return Err(ConfigError::Invalid("ransac.inlier_threshold_px must be positive".into()));
        }
        if r.min_inliers < r.subset_size || r.min_inliers > 7 {
            return Err(ConfigError::Invalid(
                "ransac.min_inliers must be in [subset_size, 7]".into(),
            ));
        }

        let e = &self.experiment;
        if e.train_samples == 0 || e.test_samples == 0 {
            return Err(ConfigError::Invalid(
                "experiment.train_samples and experiment.test_samples must be at least 1".into(),
            ));
        }
        if !(e.range_min > 0.0 && e.range_max > e.range_min) {
            return Err(ConfigError::Invalid(
                "experiment depth range needs 0 < range_min < range_max".into(),
            ));
        }
        if e.margin_frac < 0.0 {
            return Err(ConfigError::Invalid("experiment.margin_frac must be non-negative".into()));
        }
        if e.scene_cones == 0 {
            return Err(ConfigError::Invalid("experiment.scene_cones must be at least 1".into()));
        }
        if !(e.sweep_min > 0.0 && e.sweep_max >= e.sweep_min && e.sweep_step > 0.0) {
            return Err(ConfigError::Invalid(
                "experiment depth sweep needs 0 < sweep_min <= sweep_max and a positive step"
                    .into(),
            ));
        }
        if e.cones_per_bin == 0 {
            return Err(ConfigError::Invalid("experiment.cones_per_bin must be at least 1".into()));
        }
        if e.bbox_trials < 2 || e.kpvar_trials < 2 {
            return Err(ConfigError::Invalid(
                "experiment.bbox_trials and experiment.kpvar_trials must be at least 2 \
                 (they estimate variances)"
                    .into(),
            ));
        }
        if e.bbox_depths.is_empty() || e.bbox_depths.iter().any(|&z| z <= 0.0) {
            return Err(ConfigError::Invalid(
                "experiment.bbox_depths must be a non-empty list of positive depths".into(),
            ));
        }
        if e.stereo_trials == 0 {
            return Err(ConfigError::Invalid("experiment.stereo_trials must be at least 1".into()));
        }
        Ok(())
    }

    pub fn camera_model(&self) -> Result<CameraModel, ConfigError> {
        let c = &self.camera;
        CameraModel::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)
            .map_err(|e| ConfigError::Invalid(format!("[camera]: {e}")))
    }

    /// Geometry with the neutral color; scene generators draw per-cone
    /// colors themselves.
    pub fn cone_geometry(&self) -> Result<ConeGeometry, ConfigError> {
        let c = &self.cone;
        ConeGeometry::new(c.height, c.base_halfwidth, c.t2, c.t3, ColorClass::Blue)
            .map_err(|e| ConfigError::Invalid(format!("[cone]: {e}")))
    }

    pub fn noise_params(&self) -> NoiseParams {
        let n = &self.noise;
        NoiseParams {
            pixel_sigma_max: n.pixel_sigma_max,
            brightness_jitter: n.brightness_jitter,
            saturation_jitter: n.saturation_jitter,
            keypoint_sigma_px: n.keypoint_sigma_px,
            augment_rotation_deg: n.augment_rotation_deg,
            augment_scale: n.augment_scale,
            augment_translate_px: n.augment_translate_px,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr_decay_epochs: t.lr_decay_epochs.clone(),
            lr_decay_factor: t.lr_decay_factor,
            gamma: t.gamma,
            seed: self.seed,
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            input_size: PATCH_SIZE,
            base_width: self.train.base_width,
            batchnorm: self.train.batchnorm,
        }
    }

    pub fn ransac_config(&self) -> RansacConfig {
        let r = &self.ransac;
        RansacConfig {
            subset_size: r.subset_size,
            inlier_threshold_px: r.inlier_threshold_px,
            min_inliers: r.min_inliers,
        }
    }

    pub fn stereo_rig(&self) -> Result<StereoRig, ConfigError> {
        let cam = self.camera_model()?;
        StereoRig::pure_x_baseline(cam, self.stereo.baseline)
            .map_err(|e| ConfigError::Invalid(format!("[stereo]: {e}")))
    }
}
