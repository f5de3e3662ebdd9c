//! Declarative JSON run configuration with strict unknown-key rejection.
//! Precedence: command-line flags > config file > built-in defaults.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dataeval::{CorruptionMode, CorruptionSpec, ModalityId, SceneConfig};
use crate::detmini::RunMode;
use crate::preproc::RshConfig;

use super::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// One of sa|sc|ma|mc|sf|avg-baseline|conc-baseline|single-a|single-b.
    pub mode: String,
    /// Channels feeding the certainty mean factor.
    pub k: usize,
    /// Gumbel-Softmax temperature.
    pub tau: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda_box: f64,
    /// Evaluation trials (corruption re-seeded per trial).
    pub trials: usize,
    pub jobs: usize,
    pub dataset: DatasetConfig,
    /// Evaluation-time corruption.
    pub corruption: CorruptionConfig,
    /// Training-time augmentation.
    pub train_corruption: TrainCorruptionConfig,
    pub preprocess: Option<PreprocessConfig>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: "sa".to_string(),
            k: 16,
            tau: 1.0,
            lr: 1e-3,
            epochs: 10,
            batch_size: 4,
            seed: 7,
            lambda_box: 5.0,
            trials: 10,
            jobs: 1,
            dataset: DatasetConfig::default(),
            corruption: CorruptionConfig::default(),
            train_corruption: TrainCorruptionConfig::default(),
            preprocess: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub train: usize,
    pub test: usize,
    pub scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            root: PathBuf::from("data"),
            train: 400,
            test: 100,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionConfig {
    /// none|blank|noise|rsh
    pub mode: String,
    /// a|b
    pub target: String,
    pub rsh: RshConfig,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            mode: "none".to_string(),
            target: "a".to_string(),
            rsh: RshConfig::default(),
        }
    }
}

impl CorruptionConfig {
    pub fn to_spec(&self) -> Result<Option<CorruptionSpec>, CliError> {
        let mode = match self.mode.as_str() {
            "none" => return Ok(None),
            "blank" => CorruptionMode::Blank,
            "noise" => CorruptionMode::Noise,
            "rsh" => CorruptionMode::Rsh,
            other => {
                return Err(CliError::Config(format!(
                    "corruption.mode: unknown value `{other}` (expected none|blank|noise|rsh)"
                )))
            }
        };
        let target = match self.target.as_str() {
            "a" => ModalityId::A,
            "b" => ModalityId::B,
            other => {
                return Err(CliError::Config(format!(
                    "corruption.target: unknown value `{other}` (expected a|b)"
                )))
            }
        };
        if mode == CorruptionMode::Rsh {
            self.rsh
                .validate()
                .map_err(|e| CliError::Config(format!("corruption.rsh: {e}")))?;
        }
        Ok(Some(CorruptionSpec { mode, target, rsh: self.rsh.clone() }))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCorruptionConfig {
    pub mode: String,
    pub target: String,
    pub probability: f64,
    pub rsh: RshConfig,
}

impl Default for TrainCorruptionConfig {
    fn default() -> Self {
        TrainCorruptionConfig {
            mode: "none".to_string(),
            target: "a".to_string(),
            probability: 0.5,
            rsh: RshConfig::default(),
        }
    }
}

impl TrainCorruptionConfig {
    pub fn to_spec(&self) -> Result<Option<(CorruptionSpec, f64)>, CliError> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(CliError::Config(format!(
                "train_corruption.probability: {} outside [0,1]",
                self.probability
            )));
        }
        let inner = CorruptionConfig {
            mode: self.mode.clone(),
            target: self.target.clone(),
            rsh: self.rsh.clone(),
        };
        Ok(inner
            .to_spec()
            .map_err(|e| match e {
                CliError::Config(msg) => {
                    CliError::Config(msg.replace("corruption.", "train_corruption."))
                }
                other => other,
            })?
            .map(|spec| (spec, self.probability)))
    }
}

/// Preprocessing batch job: paired image directories, manual point
/// correspondences, and which outputs to produce.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Directory of source (RGB-like) images.
    pub input_a: PathBuf,
    /// Directory of target-frame (thermal/depth-like) images, paired by file
    /// name.
    pub input_b: PathBuf,
    /// JSON file holding a list of [sx, sy, tx, ty] pixel correspondences
    /// mapping modality-a points to modality-b points.
    pub correspondences: PathBuf,
    /// Warp modality-a images into the modality-b frame.
    #[serde(default = "default_true")]
    pub align: bool,
    /// When set, write r-blended images: alpha * b + (1 - alpha) * red(a).
    #[serde(default)]
    pub blend_alpha: Option<f64>,
    /// When set, write RSH-corrupted copies of the modality-a images.
    #[serde(default)]
    pub rsh: Option<RshConfig>,
    #[serde(default)]
    pub rsh_seed: u64,
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn from_file(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// The hyperparameters reported for full-scale training, kept as a named
    /// preset for documentation. Not the default: they target multi-GPU
    /// training on the full datasets, not this desk-scale artifact.
    pub fn paper_preset() -> Self {
        RunConfig {
            lr: 8e-6,
            batch_size: 2,
            epochs: 100,
            ..RunConfig::default()
        }
    }

    pub fn run_mode(&self) -> Result<RunMode, CliError> {
        self.mode
            .parse::<RunMode>()
            .map_err(|e| CliError::Config(format!("mode: {e}")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.run_mode()?;
        if self.k == 0 || self.k > 32 {
            return Err(CliError::Config(format!("k: {} outside 1..=32", self.k)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(CliError::Config(format!("tau: {} must be positive", self.tau)));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(CliError::Config(format!("lr: {} must be non-negative", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(CliError::Config("batch_size: must be >= 1".to_string()));
        }
        if self.trials == 0 {
            return Err(CliError::Config("trials: must be >= 1".to_string()));
        }
        if self.jobs == 0 {
            return Err(CliError::Config("jobs: must be >= 1".to_string()));
        }
        if self.lambda_box < 0.0 || !self.lambda_box.is_finite() {
            return Err(CliError::Config(format!(
                "lambda_box: {} must be non-negative",
                self.lambda_box
            )));
        }
        self.dataset
            .scene
            .validate()
            .map_err(|e| CliError::Config(format!("dataset.scene: {e}")))?;
        self.corruption.to_spec()?;
        self.train_corruption.to_spec()?;
        if let Some(p) = &self.preprocess {
            if let Some(alpha) = p.blend_alpha {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(CliError::Config(format!(
                        "preprocess.blend_alpha: {alpha} outside [0,1]"
                    )));
                }
            }
            if let Some(rsh) = &p.rsh {
                rsh.validate()
                    .map_err(|e| CliError::Config(format!("preprocess.rsh: {e}")))?;
            }
        }
        Ok(())
    }
}
