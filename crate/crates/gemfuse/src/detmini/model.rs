//! Multi-modal detector assembly: per-modality backbones, the configured
//! fusion path, and the transformer head, behind one forward entry point.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fusion::{self, BackboneParams, EstimatorParams, MaskParams, Modality};
use crate::preproc::Image;
use crate::tensorcore::{Graph, ParamGroup, Result, Tensor, TensorError};

use super::head::{encode_decode, predict_heads, HeadConfig, HeadParams};
use super::loss::softmax_row;

/// Full mode grid: the five fusion operators, the two unweighted baselines,
/// and the two single-modality references.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunMode {
    #[serde(rename = "sa")]
    Sa,
    #[serde(rename = "sc")]
    Sc,
    #[serde(rename = "ma")]
    Ma,
    #[serde(rename = "mc")]
    Mc,
    #[serde(rename = "sf")]
    Sf,
    #[serde(rename = "avg-baseline")]
    AvgBaseline,
    #[serde(rename = "conc-baseline")]
    ConcBaseline,
    #[serde(rename = "single-a")]
    SingleA,
    #[serde(rename = "single-b")]
    SingleB,
}

pub const ALL_MODES: [RunMode; 9] = [
    RunMode::Sa,
    RunMode::Sc,
    RunMode::Ma,
    RunMode::Mc,
    RunMode::Sf,
    RunMode::AvgBaseline,
    RunMode::ConcBaseline,
    RunMode::SingleA,
    RunMode::SingleB,
];

impl RunMode {
    pub fn id(&self) -> &'static str {
        match self {
            RunMode::Sa => "sa",
            RunMode::Sc => "sc",
            RunMode::Ma => "ma",
            RunMode::Mc => "mc",
            RunMode::Sf => "sf",
            RunMode::AvgBaseline => "avg-baseline",
            RunMode::ConcBaseline => "conc-baseline",
            RunMode::SingleA => "single-a",
            RunMode::SingleB => "single-b",
        }
    }

    pub fn uses_modality_a(&self) -> bool {
        !matches!(self, RunMode::SingleB)
    }

    pub fn uses_modality_b(&self) -> bool {
        !matches!(self, RunMode::SingleA)
    }

    pub fn needs_estimators(&self) -> bool {
        matches!(self, RunMode::Sa | RunMode::Sc)
    }

    pub fn needs_masks(&self) -> bool {
        matches!(self, RunMode::Ma | RunMode::Mc)
    }

    /// Channel count of the fused volume entering the head.
    pub fn fused_channels(&self, feature_channels: usize) -> usize {
        match self {
            RunMode::Sc | RunMode::Mc | RunMode::Sf | RunMode::ConcBaseline => 2 * feature_channels,
            _ => feature_channels,
        }
    }
}

impl FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ALL_MODES
            .iter()
            .find(|m| m.id() == s)
            .copied()
            .ok_or_else(|| {
                format!(
                    "unknown mode `{s}` (expected one of {})",
                    ALL_MODES.map(|m| m.id()).join("|")
                )
            })
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: RunMode,
    /// Channel count feeding the certainty mean factor.
    pub k: usize,
    /// Gumbel-Softmax temperature for `sf`.
    pub tau: f64,
    pub in_channels_a: usize,
    pub in_channels_b: usize,
    pub classes: usize,
    pub queries: usize,
    pub lambda_box: f64,
    pub no_object_weight: f64,
}

impl ModelConfig {
    pub fn toy(mode: RunMode, in_channels_a: usize, in_channels_b: usize, classes: usize) -> Self {
        ModelConfig {
            mode,
            k: 16,
            tau: 1.0,
            in_channels_a,
            in_channels_b,
            classes,
            queries: 10,
            lambda_box: super::loss::DEFAULT_LAMBDA_BOX,
            no_object_weight: super::loss::DEFAULT_NO_OBJECT_WEIGHT,
        }
    }

    pub fn feature_channels(&self) -> usize {
        *fusion::BACKBONE_CHANNELS.last().unwrap()
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            in_channels: self.mode.fused_channels(self.feature_channels()),
            dim: 32,
            queries: self.queries,
            classes: self.classes,
            ffn_hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.feature_channels();
        if self.k == 0 || self.k > c {
            return Err(TensorError::InvalidParameter {
                op: "model_config",
                detail: format!("k = {} out of range 1..={c}", self.k),
            });
        }
        if !(self.tau > 0.0) {
            return Err(TensorError::InvalidParameter {
                op: "model_config",
                detail: format!("tau = {} must be positive", self.tau),
            });
        }
        if self.classes == 0 || self.queries == 0 {
            return Err(TensorError::InvalidParameter {
                op: "model_config",
                detail: "classes and queries must be positive".to_string(),
            });
        }
        if self.lambda_box < 0.0 {
            return Err(TensorError::InvalidParameter {
                op: "model_config",
                detail: "lambda_box must be non-negative".to_string(),
            });
        }
        if self.no_object_weight < 0.0 || !self.no_object_weight.is_finite() {
            return Err(TensorError::InvalidParameter {
                op: "model_config",
                detail: "no_object_weight must be non-negative".to_string(),
            });
        }
        Ok(())
    }
}

/// Every learned tensor of a configured model. Groups absent from the mode
/// are None.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub backbone_a: Option<BackboneParams>,
    pub backbone_b: Option<BackboneParams>,
    pub estimator_a: Option<EstimatorParams>,
    pub estimator_b: Option<EstimatorParams>,
    pub mask_a: Option<MaskParams>,
    pub mask_b: Option<MaskParams>,
    pub head: HeadParams,
}

impl ModelParams {
    /// Deterministic initialization; parameter groups always consume the RNG
    /// in the same order.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mode = cfg.mode;
        let c = cfg.feature_channels();
        let backbone_a = mode
            .uses_modality_a()
            .then(|| BackboneParams::init(cfg.in_channels_a, rng));
        let backbone_b = mode
            .uses_modality_b()
            .then(|| BackboneParams::init(cfg.in_channels_b, rng));
        let estimator_a = mode.needs_estimators().then(|| EstimatorParams::init(c, rng));
        let estimator_b = mode.needs_estimators().then(|| EstimatorParams::init(c, rng));
        let mask_a = mode.needs_masks().then(|| MaskParams::init(c, rng));
        let mask_b = mode.needs_masks().then(|| MaskParams::init(c, rng));
        let head = HeadParams::init(&cfg.head_config(), rng);
        ModelParams { backbone_a, backbone_b, estimator_a, estimator_b, mask_a, mask_b, head }
    }
}

fn visit_opt<T: ParamGroup>(
    group: &Option<T>,
    prefix: &str,
    f: &mut dyn FnMut(&str, &Tensor),
) {
    if let Some(g) = group {
        g.visit(&mut |name, t| f(&format!("{prefix}.{name}"), t));
    }
}

fn map_opt<T: ParamGroup>(
    group: &Option<T>,
    prefix: &str,
    f: &mut dyn FnMut(&str, &Tensor) -> Result<Tensor>,
) -> Result<Option<T>> {
    match group {
        Some(g) => Ok(Some(g.map(&mut |name, t| f(&format!("{prefix}.{name}"), t))?)),
        None => Ok(None),
    }
}

impl ParamGroup for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_opt(&self.backbone_a, "backbone_a", f);
        visit_opt(&self.backbone_b, "backbone_b", f);
        visit_opt(&self.estimator_a, "estimator_a", f);
        visit_opt(&self.estimator_b, "estimator_b", f);
        visit_opt(&self.mask_a, "mask_a", f);
        visit_opt(&self.mask_b, "mask_b", f);
        self.head.visit(&mut |name, t| f(&format!("head.{name}"), t));
    }

    fn map(&self, f: &mut dyn FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<Self> {
        Ok(ModelParams {
            backbone_a: map_opt(&self.backbone_a, "backbone_a", f)?,
            backbone_b: map_opt(&self.backbone_b, "backbone_b", f)?,
            estimator_a: map_opt(&self.estimator_a, "estimator_a", f)?,
            estimator_b: map_opt(&self.estimator_b, "estimator_b", f)?,
            mask_a: map_opt(&self.mask_a, "mask_a", f)?,
            mask_b: map_opt(&self.mask_b, "mask_b", f)?,
            head: self.head.map(&mut |name, t| f(&format!("head.{name}"), t))?,
        })
    }
}

/// Class label, softmax confidence, and normalized cx/cy/w/h box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub confidence: f64,
    pub box_cxcywh: [f64; 4],
}

/// One forward pass of the full detector.
pub struct ForwardOutput {
    pub logits: Tensor,
    pub boxes: Tensor,
    /// Raw certainty pair (w_a, w_b) for modes that estimate one: scalar
    /// weights for sa/sc, spatial mask means for ma/mc.
    pub certainty: Option<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&cfg, &mut rng);
        Ok(Model { cfg, params })
    }

    /// Forward pass on one sample. `params` may be the stored detached
    /// parameters (inference) or a graph-attached copy (training).
    pub fn forward(
        &self,
        g: &Graph,
        params: &ModelParams,
        image_a: Option<&Tensor>,
        image_b: Option<&Tensor>,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOutput> {
        let mode = self.cfg.mode;
        let feat_a = match (&params.backbone_a, image_a) {
            (Some(bb), Some(img)) => Some(fusion::extract_features(g, img, bb, Modality::Rgb)?),
            (Some(_), None) => {
                return Err(TensorError::InvalidParameter {
                    op: "model_forward",
                    detail: "mode requires modality a input".to_string(),
                })
            }
            _ => None,
        };
        let feat_b = match (&params.backbone_b, image_b) {
            (Some(bb), Some(img)) => Some(fusion::extract_features(g, img, bb, Modality::Ir)?),
            (Some(_), None) => {
                return Err(TensorError::InvalidParameter {
                    op: "model_forward",
                    detail: "mode requires modality b input".to_string(),
                })
            }
            _ => None,
        };

        let mut certainty = None;
        let fused = match mode {
            RunMode::SingleA => feat_a.as_ref().unwrap().tensor.clone(),
            RunMode::SingleB => feat_b.as_ref().unwrap().tensor.clone(),
            RunMode::AvgBaseline => {
                let (a, b) = (feat_a.as_ref().unwrap(), feat_b.as_ref().unwrap());
                g.scale(&g.add(&a.tensor, &b.tensor)?, 0.5)?
            }
            RunMode::ConcBaseline => {
                let (a, b) = (feat_a.as_ref().unwrap(), feat_b.as_ref().unwrap());
                g.concat_channels(&a.tensor, &b.tensor)?
            }
            RunMode::Sa | RunMode::Sc => {
                let (a, b) = (feat_a.as_ref().unwrap(), feat_b.as_ref().unwrap());
                let wa = fusion::estimate_certainty(
                    g,
                    a,
                    params.estimator_a.as_ref().unwrap(),
                    self.cfg.k,
                )?;
                let wb = fusion::estimate_certainty(
                    g,
                    b,
                    params.estimator_b.as_ref().unwrap(),
                    self.cfg.k,
                )?;
                certainty = Some([wa.w.item(), wb.w.item()]);
                if mode == RunMode::Sa {
                    fusion::fuse_scalar_avg(g, a, b, &wa, &wb)?
                } else {
                    fusion::fuse_scalar_concat(g, a, b, &wa, &wb)?
                }
            }
            RunMode::Ma | RunMode::Mc => {
                let (a, b) = (feat_a.as_ref().unwrap(), feat_b.as_ref().unwrap());
                let ma = fusion::estimate_mask(g, a, params.mask_a.as_ref().unwrap())?;
                let mb = fusion::estimate_mask(g, b, params.mask_b.as_ref().unwrap())?;
                let mean = |m: &Tensor| m.data().iter().sum::<f64>() / m.numel() as f64;
                certainty = Some([mean(&ma.m), mean(&mb.m)]);
                if mode == RunMode::Ma {
                    fusion::fuse_mask_avg(g, a, b, &ma, &mb)?
                } else {
                    fusion::fuse_mask_concat(g, a, b, &ma, &mb)?
                }
            }
            RunMode::Sf => {
                let (a, b) = (feat_a.as_ref().unwrap(), feat_b.as_ref().unwrap());
                let ea = fusion::gumbel_softmax(g, &a.tensor.detached(), self.cfg.tau, rng)?;
                let eb = fusion::gumbel_softmax(g, &b.tensor.detached(), self.cfg.tau, rng)?;
                fusion::fuse_stochastic(g, a, b, &ea, &eb)?
            }
        };

        let head_cfg = self.cfg.head_config();
        let emb = encode_decode(g, &fused, &params.head, &head_cfg)?;
        let (logits, boxes) = predict_heads(g, &emb, &params.head)?;
        Ok(ForwardOutput { logits, boxes, certainty })
    }

    /// Inference: run the forward pass on a fresh graph and decode one
    /// detection per query (best real class, softmax confidence).
    pub fn detect(
        &self,
        image_a: Option<&Tensor>,
        image_b: Option<&Tensor>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<Detection>, Option<[f64; 2]>)> {
        let g = Graph::new();
        let out = self.forward(&g, &self.params, image_a, image_b, rng)?;
        Ok((
            extract_detections(&out.logits, &out.boxes, self.cfg.classes),
            out.certainty,
        ))
    }
}

/// Decode per-query detections: argmax over real classes with its softmax
/// probability as confidence. The no-object column only lowers confidences.
pub fn extract_detections(logits: &Tensor, boxes: &Tensor, classes: usize) -> Vec<Detection> {
    let n = logits.shape()[0];
    let width = classes + 1;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let probs = softmax_row(&logits.data()[i * width..(i + 1) * width]);
        let (mut best, mut best_p) = (0usize, f64::NEG_INFINITY);
        for (c, &p) in probs.iter().take(classes).enumerate() {
            if p > best_p {
                best = c;
                best_p = p;
            }
        }
        let b = &boxes.data()[i * 4..(i + 1) * 4];
        out.push(Detection {
            class_id: best,
            confidence: best_p,
            box_cxcywh: [b[0], b[1], b[2], b[3]],
        });
    }
    out
}

/// Reinterpret a preprocessing image as an input tensor (same CxHxW layout).
pub fn image_to_tensor(img: &Image) -> Result<Tensor> {
    Tensor::new(vec![img.channels, img.height, img.width], img.data.clone())
}
