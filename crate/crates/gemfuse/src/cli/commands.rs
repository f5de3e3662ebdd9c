//! Subcommand implementations: dataset generation, preprocessing, training,
//! evaluation, and report rendering.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataeval::{
    self, corrupt_modality, derive_seed, evaluate, generate_scene, load_dataset, save_dataset,
    EvalOptions, EvalReport, MultiModalSample,
};
use crate::detmini::{
    checkpoint, image_to_tensor, train_step, GtObject, Model, ModelConfig, TrainError,
    TrainSample,
};
use crate::fusion::certainty_report;
use crate::preproc::{
    self, estimate_homography, r_blend, warp_image, Correspondences, Image, ImageKind,
};

use super::config::RunConfig;
use super::CliError;

/// Modality channel counts of the synthetic datasets: RGB-like a, IR-like b.
const CHANNELS_A: usize = 3;
const CHANNELS_B: usize = 1;
const NUM_CLASSES: usize = 3;

// Seed stream tags, so every random decision has its own stream.
const STREAM_SCENE: u64 = 10;
const STREAM_SHUFFLE: u64 = 20;
const STREAM_TRAIN_CORRUPT: u64 = 21;
const STREAM_TRAIN_FORWARD: u64 = 22;
const STREAM_REPORT: u64 = 30;

pub fn model_config(cfg: &RunConfig) -> Result<ModelConfig, CliError> {
    let mode = cfg.run_mode()?;
    let model = ModelConfig {
        mode,
        k: cfg.k,
        tau: cfg.tau,
        in_channels_a: CHANNELS_A,
        in_channels_b: CHANNELS_B,
        classes: NUM_CLASSES,
        queries: 10,
        lambda_box: cfg.lambda_box,
    };
    model
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(model)
}

fn dir_is_nonempty(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Generate the train and test splits under `dataset.root`.
pub fn cmd_generate(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    cfg.validate()?;
    let root = &cfg.dataset.root;
    if root.exists() && dir_is_nonempty(root) && !force {
        return Err(CliError::Data(format!(
            "output directory {} is not empty (use --force to overwrite)",
            root.display()
        )));
    }
    for (split, count, stream) in [("train", cfg.dataset.train, 0u64), ("test", cfg.dataset.test, 1u64)]
    {
        let samples: Vec<MultiModalSample> = (0..count)
            .map(|i| {
                generate_scene(
                    &cfg.dataset.scene,
                    derive_seed(cfg.seed, stream, i as u64, STREAM_SCENE),
                )
            })
            .collect();
        save_dataset(&root.join(split), &samples)?;
        println!("generate: wrote {count} samples to {}", root.join(split).display());
    }
    Ok(())
}

/// Outcome of a training run.
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub checkpoint_dir: PathBuf,
    pub loss_csv: PathBuf,
}

fn sample_to_train(sample: &MultiModalSample) -> Result<TrainSample, CliError> {
    let (h, w) = sample.size();
    let gts = sample
        .gts
        .iter()
        .map(|a| {
            let [x, y, bw, bh] = a.bbox_xywh;
            GtObject {
                class_id: a.class_id,
                box_cxcywh: [
                    (x + bw / 2.0) / w as f64,
                    (y + bh / 2.0) / h as f64,
                    bw / w as f64,
                    bh / h as f64,
                ],
            }
        })
        .collect();
    Ok(TrainSample {
        image_a: image_to_tensor(&sample.image_a).map_err(|e| CliError::Internal(e.to_string()))?,
        image_b: image_to_tensor(&sample.image_b).map_err(|e| CliError::Internal(e.to_string()))?,
        gts,
    })
}

/// Train a model on `dataset.root/train`, writing a checkpoint and the
/// per-step loss curve.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let model_cfg = model_config(cfg)?;
    let train_dir = cfg.dataset.root.join("train");
    if !train_dir.is_dir() {
        return Err(CliError::Data(format!(
            "training dataset {} does not exist (run `gemfuse generate` first)",
            train_dir.display()
        )));
    }
    let dataset = load_dataset(&train_dir)?;
    if dataset.samples.is_empty() {
        return Err(CliError::Data("training dataset is empty".to_string()));
    }
    let train_corruption = cfg.train_corruption.to_spec()?;

    let mut model =
        Model::init(model_cfg, cfg.seed).map_err(|e| CliError::Internal(e.to_string()))?;
    let n = dataset.samples.len();
    let mut losses: Vec<f64> = Vec::new();

    for epoch in 0..cfg.epochs {
        // Deterministic per-epoch shuffle.
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, 0, STREAM_SHUFFLE));
        for i in (1..n).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        for (step_in_epoch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let sample = &dataset.samples[idx];
                let sample = match &train_corruption {
                    Some((spec, probability)) => {
                        let seed =
                            derive_seed(cfg.seed, epoch as u64, idx as u64, STREAM_TRAIN_CORRUPT);
                        let mut crng = ChaCha8Rng::seed_from_u64(seed);
                        if crng.gen::<f64>() < *probability {
                            corrupt_modality(sample, spec, seed, &mut crng)?
                        } else {
                            sample.clone()
                        }
                    }
                    None => sample.clone(),
                };
                batch.push(sample_to_train(&sample)?);
            }
            let mut forward_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                epoch as u64,
                step_in_epoch as u64,
                STREAM_TRAIN_FORWARD,
            ));
            let (params, loss) = match train_step(&model, &batch, cfg.lr, &mut forward_rng) {
                Ok(ok) => ok,
                Err(TrainError::Diverged) => {
                    return Err(CliError::Diverged(format!(
                        "loss became non-finite at step {}",
                        losses.len()
                    )))
                }
                Err(TrainError::Tensor(e)) => return Err(CliError::Internal(e.to_string())),
            };
            model.params = params;
            losses.push(loss);
        }
    }

    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", cfg.output_dir.display())))?;
    let checkpoint_dir = cfg.output_dir.join("checkpoint");
    checkpoint::save(&checkpoint_dir, &model, cfg.seed)
        .map_err(|e| CliError::Data(e.to_string()))?;

    let loss_csv = cfg.output_dir.join("loss.csv");
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    fs::write(&loss_csv, csv).map_err(|e| CliError::Data(e.to_string()))?;

    let summary = TrainSummary {
        steps: losses.len(),
        first_loss: losses.first().copied().unwrap_or(f64::NAN),
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        checkpoint_dir,
        loss_csv,
    };
    println!(
        "train: {} steps, loss {} -> {}, checkpoint at {}",
        summary.steps,
        summary.first_loss,
        summary.final_loss,
        summary.checkpoint_dir.display()
    );
    Ok(summary)
}

/// Evaluate a checkpoint on `dataset.root/test` and write `eval.json`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint_dir: &Path) -> Result<EvalReport, CliError> {
    cfg.validate()?;
    let (model, _manifest) =
        checkpoint::load(checkpoint_dir).map_err(|e| CliError::Data(e.to_string()))?;
    let test_dir = cfg.dataset.root.join("test");
    if !test_dir.is_dir() {
        return Err(CliError::Data(format!(
            "test dataset {} does not exist",
            test_dir.display()
        )));
    }
    let dataset = load_dataset(&test_dir)?;
    let opts = EvalOptions {
        trials: cfg.trials,
        corruption: cfg.corruption.to_spec()?,
        seed: cfg.seed,
        jobs: cfg.jobs,
        iou_threshold: 0.5,
    };
    let report = evaluate(&model, &dataset.samples, &opts)?;

    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", cfg.output_dir.display())))?;
    let path = cfg.output_dir.join("eval.json");
    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| CliError::Data(e.to_string()))?;
    println!(
        "eval: mAP@0.5 = {:.4} over {} trials -> {}",
        report.map,
        report.metadata.trials,
        path.display()
    );
    Ok(report)
}

/// Render report images for the first `count` test samples.
pub fn cmd_report(cfg: &RunConfig, checkpoint_dir: &Path, count: usize) -> Result<(), CliError> {
    cfg.validate()?;
    let (model, _) =
        checkpoint::load(checkpoint_dir).map_err(|e| CliError::Data(e.to_string()))?;
    let test_dir = cfg.dataset.root.join("test");
    let dataset = load_dataset(&test_dir)?;
    let out = cfg.output_dir.join("report");
    fs::create_dir_all(&out).map_err(|e| CliError::Data(e.to_string()))?;

    use crate::dataeval::ObjectDetector;
    for (i, sample) in dataset.samples.iter().take(count).enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0, i as u64, STREAM_REPORT));
        let output = model.detect_sample(sample, &mut rng)?;
        let certainty = match output.certainty {
            Some([wa, wb]) => {
                let rep = certainty_report(wa.max(0.0), wb.max(0.0))
                    .map_err(|e| CliError::Internal(e.to_string()))?;
                Some((rep.a, rep.b))
            }
            None => None,
        };
        dataeval::report_image::render_report_image(
            &sample.image_a,
            &output.detections,
            0.5,
            certainty,
            &out.join(format!("report_{i:04}.png")),
        )?;
    }
    println!("report: wrote {} images to {}", count.min(dataset.samples.len()), out.display());
    Ok(())
}

/// Batch preprocessing: homography alignment, r-blending, RSH corruption.
pub fn cmd_preprocess(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let p = cfg
        .preprocess
        .as_ref()
        .ok_or_else(|| CliError::Config("preprocess: section missing from config".to_string()))?;

    let corr_text = fs::read_to_string(&p.correspondences).map_err(|e| {
        CliError::Data(format!("{}: {e}", p.correspondences.display()))
    })?;
    let pairs: Vec<[f64; 4]> = serde_json::from_str(&corr_text)
        .map_err(|e| CliError::Data(format!("{}: {e}", p.correspondences.display())))?;
    let corr = Correspondences { pairs };
    let (h, residuals) =
        estimate_homography(&corr).map_err(|e| CliError::Data(e.to_string()))?;

    let mut names: Vec<String> = fs::read_dir(&p.input_a)
        .map_err(|e| CliError::Data(format!("{}: {e}", p.input_a.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().to_string())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::Data(format!(
            "no .png inputs found in {}",
            p.input_a.display()
        )));
    }

    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| CliError::Data(e.to_string()))?;

    let mut processed = 0usize;
    for (i, name) in names.iter().enumerate() {
        let img_a = Image::load_png(&p.input_a.join(name), ImageKind::Rgb)?;
        let img_b_path = p.input_b.join(name);
        if !img_b_path.is_file() {
            return Err(CliError::Data(format!(
                "modality-b pair for `{name}` is missing"
            )));
        }
        let img_b = Image::load_png(&img_b_path, ImageKind::Depth)?;

        let aligned = if p.align {
            let warped = warp_image(&img_a, &h, (img_b.height, img_b.width))?;
            let dir = out.join("aligned");
            fs::create_dir_all(&dir).map_err(|e| CliError::Data(e.to_string()))?;
            warped.save_png(&dir.join(name))?;
            warped
        } else {
            img_a.clone()
        };

        if let Some(alpha) = p.blend_alpha {
            if img_b.channels != 1 {
                return Err(CliError::Data(format!(
                    "r-blend requires a single-channel modality b, `{name}` has {}",
                    img_b.channels
                )));
            }
            let blended = r_blend(&img_b, &aligned, alpha)?;
            let dir = out.join("blended");
            fs::create_dir_all(&dir).map_err(|e| CliError::Data(e.to_string()))?;
            blended.save_png(&dir.join(name))?;
        }

        if let Some(rsh) = &p.rsh {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(p.rsh_seed, 0, i as u64, STREAM_SCENE));
            let corrupted = preproc::apply_rsh(&img_a, rsh, &mut rng)?;
            let dir = out.join("corrupted");
            fs::create_dir_all(&dir).map_err(|e| CliError::Data(e.to_string()))?;
            corrupted.save_png(&dir.join(name))?;
        }
        processed += 1;
    }

    #[derive(serde::Serialize)]
    struct HomographyOut {
        h: [f64; 9],
        residuals: preproc::ResidualStats,
    }
    let flat = [
        h.h[0][0], h.h[0][1], h.h[0][2], h.h[1][0], h.h[1][1], h.h[1][2], h.h[2][0], h.h[2][1],
        h.h[2][2],
    ];
    let mut text =
        serde_json::to_string_pretty(&HomographyOut { h: flat, residuals })
            .map_err(|e| CliError::Internal(e.to_string()))?;
    text.push('\n');
    fs::write(out.join("homography.json"), text).map_err(|e| CliError::Data(e.to_string()))?;
    println!("preprocess: {processed} image pairs -> {}", out.display());
    Ok(())
}
