//! Scene, training and benchmark configuration plus the versioned JSON file
//! that bundles them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{AssignmentConfig, Matcher};
use crate::eval::EvalConfig;
use crate::losses::LossConfig;
use crate::postprocess::NmsConfig;

pub const CONFIG_SCHEMA: u32 = 1;

/// A configuration problem tied to a dotted key path such as
/// `scene.prior_stride`.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("config key `{key}`: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            message: message.into(),
        }
    }
}

fn check(ok: bool, key: &str, message: impl FnOnce() -> String) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::new(key, message()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// `(width, height)` in pixels.
    pub image_size: (f64, f64),
    /// Inclusive range of objects per scene.
    pub objects_per_scene: (usize, usize),
    pub num_classes: usize,
    pub prior_stride: f64,
    /// Side of the square prior centered on every grid cell.
    pub prior_size: f64,
    /// Inclusive range for object widths and heights.
    pub object_size: (f64, f64),
    pub feature_dim: usize,
    /// Offset of the class-discriminative point from the box center, as a
    /// fraction of the box diagonal.
    pub divergence_bias: f64,
    pub noise_sigma: f64,
    /// Objects may overlap each other up to this IoU.
    pub max_gt_iou: f64,
    /// Every object must have a prior overlapping it at least this much.
    pub min_prior_iou: f64,
    pub features: FeatureShape,
    pub seed: u64,
}

/// Shape of the synthetic feature bumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureShape {
    /// Width of the bump around the discriminative point, in box diagonals.
    pub discriminative_width: f64,
    /// Width of the center bumps, in units of half the box size.
    pub center_width: f64,
    /// Width of the regression-evidence attenuation, in units of half the
    /// box size.
    pub reliability_width: f64,
    /// Amplitude of the weak class evidence at the center.
    pub center_class_gain: f64,
}

impl Default for FeatureShape {
    fn default() -> Self {
        Self {
            discriminative_width: 0.35,
            center_width: 0.5,
            reliability_width: 0.8,
            center_class_gain: 0.7,
        }
    }
}

impl FeatureShape {
    fn validate(&self) -> Result<(), ConfigError> {
        let widths = [
            ("scene.features.discriminative_width", self.discriminative_width),
            ("scene.features.center_width", self.center_width),
            ("scene.features.reliability_width", self.reliability_width),
        ];
        for (key, v) in widths {
            check(v > 0.0 && v.is_finite(), key, || format!("must be positive, got {v}"))?;
        }
        check(
            self.center_class_gain >= 0.0 && self.center_class_gain.is_finite(),
            "scene.features.center_class_gain",
            || "must be >= 0".into(),
        )
    }
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: (64.0, 64.0),
            objects_per_scene: (1, 3),
            num_classes: 3,
            prior_stride: 8.0,
            prior_size: 24.0,
            object_size: (16.0, 32.0),
            feature_dim: 16,
            divergence_bias: 0.4,
            noise_sigma: 0.1,
            max_gt_iou: 0.3,
            min_prior_iou: 0.5,
            features: FeatureShape::default(),
            seed: 0,
        }
    }
}

impl SceneConfig {
    /// Number of leading feature dimensions with a fixed meaning; the rest
    /// carry noise only.
    pub fn signal_dims(&self) -> usize {
        2 * self.num_classes + 5
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let (w, h) = self.image_size;
        check(w > 0.0 && h > 0.0, "scene.image_size", || {
            format!("must be positive, got ({w}, {h})")
        })?;
        let (lo, hi) = self.objects_per_scene;
        check(lo >= 1 && lo <= hi, "scene.objects_per_scene", || {
            format!("needs 1 <= min <= max, got ({lo}, {hi})")
        })?;
        check(self.num_classes >= 1, "scene.num_classes", || "must be >= 1".into())?;
        check(
            self.prior_stride > 0.0 && self.prior_stride.is_finite(),
            "scene.prior_stride",
            || format!("must be positive, got {}", self.prior_stride),
        )?;
        check(
            self.prior_stride <= w.min(h),
            "scene.prior_stride",
            || "must not exceed the image size".into(),
        )?;
        check(self.prior_size > 0.0, "scene.prior_size", || {
            format!("must be positive, got {}", self.prior_size)
        })?;
        let (smin, smax) = self.object_size;
        check(
            smin > 0.0 && smin <= smax && smax <= w.min(h),
            "scene.object_size",
            || format!("needs 0 < min <= max <= image size, got ({smin}, {smax})"),
        )?;
        check(
            self.feature_dim >= self.signal_dims(),
            "scene.feature_dim",
            || {
                format!(
                    "must be at least {} for {} classes",
                    self.signal_dims(),
                    self.num_classes
                )
            },
        )?;
        check(
            (0.0..=1.0).contains(&self.divergence_bias),
            "scene.divergence_bias",
            || format!("must lie in [0, 1], got {}", self.divergence_bias),
        )?;
        check(
            self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(),
            "scene.noise_sigma",
            || format!("must be >= 0, got {}", self.noise_sigma),
        )?;
        check((0.0..=1.0).contains(&self.max_gt_iou), "scene.max_gt_iou", || {
            "must lie in [0, 1]".into()
        })?;
        check(
            (0.0..=1.0).contains(&self.min_prior_iou),
            "scene.min_prior_iou",
            || "must lie in [0, 1]".into(),
        )?;
        self.features.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    /// Core positives only for the whole run.
    FixedThreshold,
    /// Switch to mutual labeling after `mlc_enable_epoch`.
    MutualLabeling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// 1-based epochs at whose start the learning rate is multiplied by
    /// `lr_drop_factor`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    /// Mutual labeling (when enabled) applies from epoch
    /// `mlc_enable_epoch + 1` on.
    pub mlc_enable_epoch: usize,
    pub baseline_mode: BaselineMode,
    pub assignment: AssignmentConfig,
    pub losses: LossConfig,
    pub nms: NmsConfig,
    /// Per-class confidence below which candidates are not emitted as
    /// detections.
    pub score_threshold: f64,
    pub eval: EvalConfig,
    /// Run validation after every epoch; otherwise only after the last.
    pub validate_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 24,
            train_scenes: 200,
            val_scenes: 50,
            batch_size: 1,
            lr: 0.1,
            lr_drop_epochs: vec![18, 22],
            lr_drop_factor: 0.1,
            mlc_enable_epoch: 12,
            baseline_mode: BaselineMode::MutualLabeling,
            assignment: AssignmentConfig {
                alpha: 2.0,
                matcher: Matcher::IouBand { low: 0.4, high: 0.5 },
                min_candidates: 1,
            },
            losses: LossConfig::default(),
            nms: NmsConfig::default(),
            score_threshold: 0.05,
            eval: EvalConfig::default(),
            validate_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        check(self.epochs >= 1, "train.epochs", || "must be >= 1".into())?;
        check(self.train_scenes >= 1, "train.train_scenes", || "must be >= 1".into())?;
        check(self.val_scenes >= 1, "train.val_scenes", || "must be >= 1".into())?;
        check(self.batch_size >= 1, "train.batch_size", || "must be >= 1".into())?;
        check(self.lr > 0.0 && self.lr.is_finite(), "train.lr", || {
            format!("must be positive, got {}", self.lr)
        })?;
        check(
            self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite(),
            "train.lr_drop_factor",
            || "must be positive".into(),
        )?;
        check(
            self.mlc_enable_epoch <= self.epochs,
            "train.mlc_enable_epoch",
            || format!("must not exceed epochs ({})", self.epochs),
        )?;
        self.assignment
            .validate()
            .map_err(|e| ConfigError::new("train.assignment", e.to_string()))?;
        self.losses
            .validate()
            .map_err(|e| ConfigError::new("train.losses", e))?;
        check(
            self.nms.iou_threshold > 0.0 && self.nms.iou_threshold <= 1.0,
            "train.nms.iou_threshold",
            || "must lie in (0, 1]".into(),
        )?;
        check(self.nms.max_out >= 1, "train.nms.max_out", || "must be >= 1".into())?;
        check(
            (0.0..1.0).contains(&self.score_threshold),
            "train.score_threshold",
            || "must lie in [0, 1)".into(),
        )?;
        self.eval
            .validate()
            .map_err(|e| ConfigError::new("train.eval", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Every cell of the grid is trained and evaluated once per seed.
    pub seeds: Vec<u64>,
    /// Mutual-labeling gamma used by the IoU-rescoring cells.
    pub iur_gamma: f64,
    /// Standard deviation of the Gaussian noise added to predicted IoUs for
    /// the noisy-IoU comparison rows.
    pub iou_noise_sigma: f64,
    /// Extra alpha values evaluated for the mutual-labeling cell.
    pub alpha_sweep: Vec<f64>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            iur_gamma: 1.0,
            iou_noise_sigma: 0.25,
            alpha_sweep: vec![0.0, 0.5],
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        check(!self.seeds.is_empty(), "benchmark.seeds", || "must not be empty".into())?;
        check(
            self.iur_gamma > 0.0 && self.iur_gamma.is_finite(),
            "benchmark.iur_gamma",
            || "must be positive".into(),
        )?;
        check(
            self.iou_noise_sigma >= 0.0 && self.iou_noise_sigma.is_finite(),
            "benchmark.iou_noise_sigma",
            || "must be >= 0".into(),
        )?;
        check(
            self.alpha_sweep.iter().all(|a| *a >= 0.0 && a.is_finite()),
            "benchmark.alpha_sweep",
            || "entries must be >= 0".into(),
        )?;
        Ok(())
    }
}

/// Top-level config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema: u32,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub benchmark: BenchmarkConfig,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self {
            schema: CONFIG_SCHEMA,
            scene: SceneConfig::default(),
            train: TrainConfig::default(),
            benchmark: BenchmarkConfig::default(),
        }
    }
}

impl ConfigFile {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ConfigFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." { "<root>".to_string() } else { path };
            ConfigError::new(key, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        check(self.schema == CONFIG_SCHEMA, "schema", || {
            format!("unsupported schema {}, expected {CONFIG_SCHEMA}", self.schema)
        })?;
        self.scene.validate()?;
        self.train.validate()?;
        if let Matcher::IouBand { high, .. } = self.train.assignment.matcher {
            check(self.scene.min_prior_iou >= high, "scene.min_prior_iou", || {
                format!("must be >= train.assignment.matcher high ({high}) so every object has a core positive")
            })?;
        }
        self.benchmark.validate()
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
