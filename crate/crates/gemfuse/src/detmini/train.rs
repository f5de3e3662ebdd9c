//! Plain gradient-descent training over backbones, certainty estimators, and
//! head parameters jointly. One tape per step; the batch loss is the mean of
//! the per-sample set losses.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensorcore::{Graph, ParamGroup, Tensor, TensorError};

use super::hungarian::hungarian_match;
use super::loss::{matching_costs, set_loss_weighted, GtObject};
use super::model::{Model, ModelParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: loss is not finite")]
    Diverged,
    #[error(transparent)]
    Tensor(TensorError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        // A non-finite value anywhere in the training graph is divergence,
        // not an implementation error.
        match e {
            TensorError::NonFinite { .. } => TrainError::Diverged,
            other => TrainError::Tensor(other),
        }
    }
}

/// One training sample already converted to input tensors.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image_a: Tensor,
    pub image_b: Tensor,
    pub gts: Vec<GtObject>,
}

/// Single gradient-descent step over a batch. Returns the updated parameters
/// and the batch loss. A learning rate of zero leaves the parameters
/// bit-identical.
pub fn train_step(
    model: &Model,
    batch: &[TrainSample],
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelParams, f64), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Tensor(TensorError::InvalidParameter {
            op: "train_step",
            detail: "empty batch".to_string(),
        }));
    }
    if lr < 0.0 || !lr.is_finite() {
        return Err(TrainError::Tensor(TensorError::InvalidParameter {
            op: "train_step",
            detail: format!("learning rate {lr}"),
        }));
    }

    let g = Graph::new();
    let attached = model.params.attach(&g)?;
    let mode = model.cfg.mode;

    let mut total: Option<Tensor> = None;
    for sample in batch {
        let out = model.forward(
            &g,
            &attached,
            mode.uses_modality_a().then_some(&sample.image_a),
            mode.uses_modality_b().then_some(&sample.image_b),
            rng,
        )?;
        let costs = matching_costs(
            &out.logits,
            &out.boxes,
            &sample.gts,
            model.cfg.classes,
            model.cfg.lambda_box,
        )?;
        let assignment = hungarian_match(&costs)?;
        let loss = set_loss_weighted(
            &g,
            &out.logits,
            &out.boxes,
            &sample.gts,
            &assignment,
            model.cfg.classes,
            model.cfg.lambda_box,
            model.cfg.no_object_weight,
        )?;
        total = Some(match total {
            Some(t) => g.add(&t, &loss)?,
            None => loss,
        });
    }
    let total = g.scale(&total.unwrap(), 1.0 / batch.len() as f64)?;
    let loss_value = total.item();
    if !loss_value.is_finite() {
        return Err(TrainError::Diverged);
    }

    let grads = g.backward(&total)?;
    let updated = attached.map(&mut |_, t| {
        let grad = grads.wrt(t)?;
        let data: Vec<f64> = t
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&p, &d)| p - lr * d)
            .collect();
        Tensor::new(t.shape().to_vec(), data)
    });
    match updated {
        Ok(params) => Ok((params, loss_value)),
        Err(e) => Err(e.into()),
    }
}
