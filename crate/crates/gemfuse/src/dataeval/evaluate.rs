//! Evaluation protocol: run a detector over a test set for a number of
//! trials, re-seeding the corruption each trial, and aggregate per-class
//! AP@0.5, mAP, and mean sensor certainty.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detmini::{image_to_tensor, Detection, Model};
use crate::fusion::certainty_report;

use super::metrics::{cxcywh_to_xyxy, mean_average_precision, xywh_to_xyxy, EvalDet, EvalGt};
use super::scene::CLASS_NAMES;
use super::{
    corrupt_modality, derive_seed, CorruptionSpec, EvalError, MultiModalSample, Result,
};

/// Detector output for one sample: decoded detections plus the raw certainty
/// pair when the fusion mode estimates one.
#[derive(Debug, Clone)]
pub struct DetectionOutput {
    pub detections: Vec<Detection>,
    pub certainty: Option<[f64; 2]>,
}

/// Anything that can detect objects in a paired-modality sample.
pub trait ObjectDetector: Sync {
    fn detect_sample(
        &self,
        sample: &MultiModalSample,
        rng: &mut ChaCha8Rng,
    ) -> Result<DetectionOutput>;

    fn num_classes(&self) -> usize;
}

impl ObjectDetector for Model {
    fn detect_sample(
        &self,
        sample: &MultiModalSample,
        rng: &mut ChaCha8Rng,
    ) -> Result<DetectionOutput> {
        let mode = self.cfg.mode;
        let ta;
        let tb;
        let image_a = if mode.uses_modality_a() {
            ta = image_to_tensor(&sample.image_a)?;
            Some(&ta)
        } else {
            None
        };
        let image_b = if mode.uses_modality_b() {
            tb = image_to_tensor(&sample.image_b)?;
            Some(&tb)
        } else {
            None
        };
        let (detections, certainty) = self.detect(image_a, image_b, rng)?;
        Ok(DetectionOutput { detections, certainty })
    }

    fn num_classes(&self) -> usize {
        self.cfg.classes
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOptions {
    pub trials: usize,
    pub corruption: Option<CorruptionSpec>,
    pub seed: u64,
    pub jobs: usize,
    pub iou_threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { trials: 10, corruption: None, seed: 0, jobs: 1, iou_threshold: 0.5 }
    }
}

/// Mean normalized sensor contributions over the evaluated samples.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MeanCertainty {
    pub a: f64,
    pub b: f64,
    /// Fraction of samples whose weights were both zero (0.5/0.5 fallback).
    pub degenerate_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub trials: usize,
    pub seed: u64,
    pub iou_threshold: f64,
    pub ap_interpolation: String,
    pub tie_break: String,
    pub corruption: Option<CorruptionSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: EvalMetadata,
    /// Per-class AP@threshold, averaged over trials; class name keyed.
    pub per_class_ap: BTreeMap<String, f64>,
    /// Mean over per-trial mAPs.
    pub map: f64,
    pub per_trial_map: Vec<f64>,
    pub mean_certainty: Option<MeanCertainty>,
}

struct TrialOutcome {
    per_class: BTreeMap<usize, f64>,
    map: f64,
    certainty_sum: [f64; 2],
    certainty_count: usize,
    degenerate_count: usize,
}

fn run_trial<D: ObjectDetector + ?Sized>(
    detector: &D,
    samples: &[MultiModalSample],
    opts: &EvalOptions,
    trial: usize,
) -> Result<TrialOutcome> {
    let mut dets: Vec<EvalDet> = Vec::new();
    let mut gts: Vec<EvalGt> = Vec::new();
    let mut certainty_sum = [0.0f64; 2];
    let mut certainty_count = 0usize;
    let mut degenerate_count = 0usize;

    let per_sample = |(idx, sample): (usize, &MultiModalSample)| -> Result<(Vec<EvalDet>, Vec<EvalGt>, Option<[f64; 2]>, bool)> {
        let corrupt_seed = derive_seed(opts.seed, trial as u64, idx as u64, 0);
        let detect_seed = derive_seed(opts.seed, trial as u64, idx as u64, 1);
        let owned;
        let eval_sample = match &opts.corruption {
            Some(spec) => {
                let mut crng = ChaCha8Rng::seed_from_u64(corrupt_seed);
                owned = corrupt_modality(sample, spec, corrupt_seed, &mut crng)?;
                &owned
            }
            None => sample,
        };
        let mut drng = ChaCha8Rng::seed_from_u64(detect_seed);
        let output = detector.detect_sample(eval_sample, &mut drng)?;

        let (h, w) = eval_sample.size();
        let scale = [w as f64, h as f64, w as f64, h as f64];
        let sample_dets: Vec<EvalDet> = output
            .detections
            .iter()
            .map(|d| {
                let b = cxcywh_to_xyxy(&d.box_cxcywh);
                EvalDet {
                    image_id: idx,
                    class_id: d.class_id,
                    confidence: d.confidence,
                    bbox: [b[0] * scale[0], b[1] * scale[1], b[2] * scale[2], b[3] * scale[3]],
                }
            })
            .collect();
        let sample_gts: Vec<EvalGt> = eval_sample
            .gts
            .iter()
            .map(|a| EvalGt {
                image_id: idx,
                class_id: a.class_id,
                bbox: xywh_to_xyxy(&a.bbox_xywh),
            })
            .collect();

        let (norm, degenerate) = match output.certainty {
            Some([wa, wb]) => {
                let rep = certainty_report(wa.max(0.0), wb.max(0.0))
                    .map_err(EvalError::Tensor)?;
                (Some([rep.a, rep.b]), rep.degenerate)
            }
            None => (None, false),
        };
        Ok((sample_dets, sample_gts, norm, degenerate))
    };

    let results: Vec<_> = if opts.jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| EvalError::InvalidInput(format!("thread pool: {e}")))?;
        pool.install(|| {
            samples
                .par_iter()
                .enumerate()
                .map(per_sample)
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        samples
            .iter()
            .enumerate()
            .map(per_sample)
            .collect::<Result<Vec<_>>>()?
    };

    for (sample_dets, sample_gts, certainty, degenerate) in results {
        dets.extend(sample_dets);
        gts.extend(sample_gts);
        if let Some([a, b]) = certainty {
            certainty_sum[0] += a;
            certainty_sum[1] += b;
            certainty_count += 1;
            if degenerate {
                degenerate_count += 1;
            }
        }
    }

    let (per_class, map) =
        mean_average_precision(&dets, &gts, detector.num_classes(), opts.iou_threshold);
    Ok(TrialOutcome { per_class, map, certainty_sum, certainty_count, degenerate_count })
}

/// Evaluate a detector over a test set. Corruption is re-seeded per trial and
/// per sample; with no corruption every trial is identical by construction.
pub fn evaluate<D: ObjectDetector + ?Sized>(
    detector: &D,
    samples: &[MultiModalSample],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(EvalError::InvalidInput("empty test set".to_string()));
    }
    if opts.trials == 0 {
        return Err(EvalError::InvalidInput("trials must be >= 1".to_string()));
    }

    let mut per_trial_map = Vec::with_capacity(opts.trials);
    let mut class_sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut certainty_sum = [0.0f64; 2];
    let mut certainty_count = 0usize;
    let mut degenerate_count = 0usize;

    for trial in 0..opts.trials {
        let outcome = run_trial(detector, samples, opts, trial)?;
        per_trial_map.push(outcome.map);
        for (class, ap) in outcome.per_class {
            let e = class_sums.entry(class).or_insert((0.0, 0));
            e.0 += ap;
            e.1 += 1;
        }
        certainty_sum[0] += outcome.certainty_sum[0];
        certainty_sum[1] += outcome.certainty_sum[1];
        certainty_count += outcome.certainty_count;
        degenerate_count += outcome.degenerate_count;
    }

    let per_class_ap: BTreeMap<String, f64> = class_sums
        .into_iter()
        .map(|(class, (sum, n))| {
            let name = CLASS_NAMES
                .get(class)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("class{class}"));
            (name, sum / n as f64)
        })
        .collect();
    let map = per_trial_map.iter().sum::<f64>() / per_trial_map.len() as f64;
    let mean_certainty = if certainty_count > 0 {
        Some(MeanCertainty {
            a: certainty_sum[0] / certainty_count as f64,
            b: certainty_sum[1] / certainty_count as f64,
            degenerate_fraction: degenerate_count as f64 / certainty_count as f64,
        })
    } else {
        None
    };

    Ok(EvalReport {
        metadata: EvalMetadata {
            trials: opts.trials,
            seed: opts.seed,
            iou_threshold: opts.iou_threshold,
            ap_interpolation: "all-point".to_string(),
            tie_break: "stable-detection-index".to_string(),
            corruption: opts.corruption.clone(),
        },
        per_class_ap,
        map,
        per_trial_map,
        mean_certainty,
    })
}
