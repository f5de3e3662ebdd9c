//! Synthetic two-modality dataset generation and the detection evaluation
//! protocol: IoU, per-class AP@0.5, mAP, and multi-trial corruption
//! averaging.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preproc::{Image, PreprocError, RshConfig};
use crate::tensorcore::TensorError;

pub mod dataset;
pub mod evaluate;
pub mod metrics;
pub mod report_image;
pub mod scene;

pub use dataset::{load_dataset, save_dataset, DatasetOnDisk};
pub use evaluate::{
    evaluate, DetectionOutput, EvalOptions, EvalReport, MeanCertainty, ObjectDetector,
};
pub use metrics::{average_precision, iou, mean_average_precision, EvalDet, EvalGt};
pub use scene::{generate_scene, SceneConfig, CLASS_NAMES};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error(transparent)]
    Preproc(#[from] PreprocError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Which modality a corruption targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityId {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    Blank,
    Noise,
    Rsh,
}

/// What corruption to apply at evaluation or training time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub mode: CorruptionMode,
    pub target: ModalityId,
    #[serde(default)]
    pub rsh: RshConfig,
}

/// Record of a corruption that was applied to a sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub mode: CorruptionMode,
    pub target: ModalityId,
    pub seed: u64,
}

/// Ground-truth annotation in pixel coordinates: top-left x/y, width, height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox_xywh: [f64; 4],
}

/// Paired modality images with ground truth and corruption provenance.
#[derive(Debug, Clone)]
pub struct MultiModalSample {
    pub image_a: Image,
    pub image_b: Image,
    pub gts: Vec<Annotation>,
    pub corruption: Option<CorruptionRecord>,
}

impl MultiModalSample {
    pub fn size(&self) -> (usize, usize) {
        (self.image_a.height, self.image_a.width)
    }
}

/// Apply a corruption to one modality of a sample; ground truth is untouched.
pub fn corrupt_modality<R: rand::Rng>(
    sample: &MultiModalSample,
    spec: &CorruptionSpec,
    seed: u64,
    rng: &mut R,
) -> Result<MultiModalSample> {
    let mut out = sample.clone();
    let target = match spec.target {
        ModalityId::A => &mut out.image_a,
        ModalityId::B => &mut out.image_b,
    };
    match spec.mode {
        CorruptionMode::Blank => {
            for v in &mut target.data {
                *v = 0.0;
            }
        }
        CorruptionMode::Noise => {
            for v in &mut target.data {
                *v = rng.gen::<f64>();
            }
        }
        CorruptionMode::Rsh => {
            *target = crate::preproc::apply_rsh(target, &spec.rsh, rng)?;
        }
    }
    out.corruption = Some(CorruptionRecord { mode: spec.mode, target: spec.target, seed });
    Ok(out)
}

/// Stream- and index-separated seed derivation so parallel evaluation stays
/// deterministic regardless of scheduling.
pub(crate) fn derive_seed(base: u64, trial: u64, sample: u64, stream: u64) -> u64 {
    let mut x = base
        ^ trial.wrapping_mul(0xA24B_AED4_963E_E407)
        ^ sample.wrapping_mul(0x9FB2_1C65_1E98_DF25)
        ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
