//! Set-prediction loss over an optimal bipartite matching.
//!
//! Matched pairs contribute classification cross-entropy plus a weighted L1
//! box term; unmatched predictions are trained toward the no-object class.

use crate::tensorcore::{Graph, Result, Tensor, TensorError};

use super::hungarian::Assignment;

/// Default weight of the L1 box term.
pub const DEFAULT_LAMBDA_BOX: f64 = 5.0;

/// Down-weight on the no-object cross-entropy of unmatched predictions.
/// With ten queries and at most a few objects per scene, unit weighting lets
/// the no-object class swamp the matched terms and training collapses to
/// background-only predictions; the base set-prediction method uses 0.1.
pub const DEFAULT_NO_OBJECT_WEIGHT: f64 = 0.1;

/// One ground-truth object: class index and normalized cx/cy/w/h box.
#[derive(Debug, Clone, PartialEq)]
pub struct GtObject {
    pub class_id: usize,
    pub box_cxcywh: [f64; 4],
}

/// Numerically stable softmax of one logits row.
pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

/// G x N matching cost matrix: -p(class_gt) + lambda_box * L1(box, box_gt),
/// computed on detached forward values.
pub fn matching_costs(
    logits: &Tensor,
    boxes: &Tensor,
    gts: &[GtObject],
    classes: usize,
    lambda_box: f64,
) -> Result<Vec<Vec<f64>>> {
    let n = logits.shape()[0];
    if logits.shape().len() != 2 || logits.shape()[1] != classes + 1 || boxes.shape() != [n, 4] {
        return Err(TensorError::InvalidShape {
            op: "matching_costs",
            detail: format!("logits {:?}, boxes {:?}", logits.shape(), boxes.shape()),
        });
    }
    let width = classes + 1;
    let probs: Vec<Vec<f64>> = (0..n)
        .map(|i| softmax_row(&logits.data()[i * width..(i + 1) * width]))
        .collect();
    let mut cost = Vec::with_capacity(gts.len());
    for gt in gts {
        if gt.class_id >= classes {
            return Err(TensorError::InvalidParameter {
                op: "matching_costs",
                detail: format!("class id {} out of range 0..{classes}", gt.class_id),
            });
        }
        let mut row = Vec::with_capacity(n);
        for i in 0..n {
            let l1: f64 = (0..4)
                .map(|d| (boxes.data()[i * 4 + d] - gt.box_cxcywh[d]).abs())
                .sum();
            row.push(-probs[i][gt.class_id] + lambda_box * l1);
        }
        cost.push(row);
    }
    Ok(cost)
}

/// Differentiable set loss for one sample given a fixed assignment:
/// sum over matched pairs of CE(class) + lambda_box * L1(box), plus
/// CE(no-object) over unmatched predictions. `set_loss` applies unit
/// no-object weighting; training uses [`set_loss_weighted`] with
/// [`DEFAULT_NO_OBJECT_WEIGHT`].
pub fn set_loss(
    g: &Graph,
    logits: &Tensor,
    boxes: &Tensor,
    gts: &[GtObject],
    assignment: &Assignment,
    classes: usize,
    lambda_box: f64,
) -> Result<Tensor> {
    set_loss_weighted(g, logits, boxes, gts, assignment, classes, lambda_box, 1.0)
}

/// Set loss with a configurable weight on the unmatched no-object
/// cross-entropy.
#[allow(clippy::too_many_arguments)]
pub fn set_loss_weighted(
    g: &Graph,
    logits: &Tensor,
    boxes: &Tensor,
    gts: &[GtObject],
    assignment: &Assignment,
    classes: usize,
    lambda_box: f64,
    no_object_weight: f64,
) -> Result<Tensor> {
    let n = logits.shape()[0];
    let width = classes + 1;
    if logits.shape() != [n, width] || boxes.shape() != [n, 4] {
        return Err(TensorError::InvalidShape {
            op: "set_loss",
            detail: format!("logits {:?}, boxes {:?}", logits.shape(), boxes.shape()),
        });
    }
    if assignment.gt_to_pred.len() != gts.len() {
        return Err(TensorError::InvalidParameter {
            op: "set_loss",
            detail: "assignment does not cover the ground truths".to_string(),
        });
    }
    if no_object_weight < 0.0 || !no_object_weight.is_finite() {
        return Err(TensorError::InvalidParameter {
            op: "set_loss",
            detail: format!("no_object_weight {no_object_weight}"),
        });
    }

    // Class targets: matched rows carry their ground-truth class at unit
    // weight, everything else trains toward no-object (the last column) at
    // the configured weight.
    let mut target = vec![0.0; n * width];
    let mut box_target = vec![0.0; n * 4];
    let mut box_mask = vec![0.0; n * 4];
    for i in 0..n {
        target[i * width + classes] = no_object_weight;
    }
    for (j, gt) in gts.iter().enumerate() {
        let pred = assignment.gt_to_pred[j];
        if pred >= n {
            return Err(TensorError::InvalidParameter {
                op: "set_loss",
                detail: format!("assignment points at prediction {pred} of {n}"),
            });
        }
        target[pred * width + classes] = 0.0;
        target[pred * width + gt.class_id] = 1.0;
        for d in 0..4 {
            box_target[pred * 4 + d] = gt.box_cxcywh[d];
            box_mask[pred * 4 + d] = 1.0;
        }
    }

    let target = g.input(&Tensor::new(vec![n, width], target)?)?;
    let box_target = g.input(&Tensor::new(vec![n, 4], box_target)?)?;
    let box_mask = g.input(&Tensor::new(vec![n, 4], box_mask)?)?;

    let log_probs = g.log_softmax_temp(logits, 1, 1.0)?;
    let picked = g.hadamard(&log_probs, &target)?;
    let ce = g.scale(&g.sum(&picked)?, -1.0)?;

    let diff = g.abs(&g.sub(boxes, &box_target)?)?;
    let l1 = g.sum(&g.hadamard(&diff, &box_mask)?)?;

    g.add(&ce, &g.scale(&l1, lambda_box)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detmini::hungarian::hungarian_match;

    fn logits_for(n: usize, width: usize, rows: &[(usize, usize, f64)]) -> Tensor {
        // rows: (row, hot column, magnitude); all else zero.
        let mut data = vec![0.0; n * width];
        for &(r, c, v) in rows {
            data[r * width + c] = v;
        }
        Tensor::new(vec![n, width], data).unwrap()
    }

    #[test]
    fn perfect_predictions_drive_loss_to_zero() {
        let g = Graph::new();
        let classes = 3;
        let gts = vec![GtObject { class_id: 1, box_cxcywh: [0.5, 0.5, 0.2, 0.2] }];
        // Query 0 predicts class 1 with huge margin and the exact box;
        // the other query predicts no-object with huge margin.
        let logits = g
            .input(&logits_for(2, 4, &[(0, 1, 50.0), (1, 3, 50.0)]))
            .unwrap();
        let boxes = g
            .input(&Tensor::new(vec![2, 4], vec![0.5, 0.5, 0.2, 0.2, 0.1, 0.1, 0.1, 0.1]).unwrap())
            .unwrap();
        let assign = Assignment { gt_to_pred: vec![0], cost: 0.0 };
        let loss = set_loss(&g, &logits, &boxes, &gts, &assign, classes, 5.0).unwrap();
        assert!(loss.item() < 1e-9, "loss {}", loss.item());
    }

    #[test]
    fn empty_ground_truth_is_pure_no_object_ce() {
        let g = Graph::new();
        let classes = 3;
        let n = 4;
        let logits = g.input(&Tensor::zeros(vec![n, 4])).unwrap();
        let boxes = g.input(&Tensor::filled(vec![n, 4], 0.3)).unwrap();
        let assign = Assignment::empty();
        let loss = set_loss(&g, &logits, &boxes, &[], &assign, classes, 5.0).unwrap();
        // Uniform logits: CE per row is ln(4).
        let expect = n as f64 * 4.0f64.ln();
        assert!((loss.item() - expect).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_case() {
        // One gt (class 0, box all 0.5), two preds.
        // Pred 0: logits [1, 0, 0], box [0.4, 0.5, 0.5, 0.5].
        // Pred 1: logits [0, 2, 0], box [0, 0, 0, 0].
        let g = Graph::new();
        let classes = 2;
        let gts = vec![GtObject { class_id: 0, box_cxcywh: [0.5; 4] }];
        let logits_t = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0]).unwrap();
        let boxes_t =
            Tensor::new(vec![2, 4], vec![0.4, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0]).unwrap();

        let costs = matching_costs(&logits_t, &boxes_t, &gts, classes, 5.0).unwrap();
        // Cost row: pred0 = -p0(c0) + 5*0.1; pred1 = -p1(c0) + 5*2.0.
        let p0 = softmax_row(&[1.0, 0.0, 0.0])[0];
        let p1 = softmax_row(&[0.0, 2.0, 0.0])[0];
        assert!((costs[0][0] - (-p0 + 0.5)).abs() < 1e-12);
        assert!((costs[0][1] - (-p1 + 10.0)).abs() < 1e-12);

        let assign = hungarian_match(&costs).unwrap();
        assert_eq!(assign.gt_to_pred, vec![0]);

        let logits = g.input(&logits_t).unwrap();
        let boxes = g.input(&boxes_t).unwrap();
        let loss = set_loss(&g, &logits, &boxes, &gts, &assign, classes, 5.0).unwrap();
        // CE(matched) = -ln p0; CE(unmatched no-object) = -ln p_noobj(pred1);
        // box term = 5 * 0.1.
        let p_noobj = softmax_row(&[0.0, 2.0, 0.0])[2];
        let expect = -p0.ln() - p_noobj.ln() + 0.5;
        assert!((loss.item() - expect).abs() < 1e-12, "{} vs {expect}", loss.item());
    }

    #[test]
    fn gt_shuffle_leaves_matched_loss_unchanged() {
        let g = Graph::new();
        let classes = 3;
        let logits_t = Tensor::new(
            vec![3, 4],
            vec![2.0, 0.1, 0.0, 0.3, 0.0, 1.5, 0.2, 0.1, 0.3, 0.2, 2.5, 0.0],
        )
        .unwrap();
        let boxes_t = Tensor::new(
            vec![3, 4],
            vec![0.2, 0.2, 0.1, 0.1, 0.7, 0.7, 0.2, 0.2, 0.5, 0.5, 0.3, 0.3],
        )
        .unwrap();
        let gts = vec![
            GtObject { class_id: 0, box_cxcywh: [0.25, 0.2, 0.1, 0.1] },
            GtObject { class_id: 2, box_cxcywh: [0.5, 0.5, 0.3, 0.35] },
        ];
        let eval = |gts: &[GtObject]| {
            let costs = matching_costs(&logits_t, &boxes_t, gts, classes, 5.0).unwrap();
            let assign = hungarian_match(&costs).unwrap();
            let logits = g.input(&logits_t).unwrap();
            let boxes = g.input(&boxes_t).unwrap();
            set_loss(&g, &logits, &boxes, gts, &assign, classes, 5.0).unwrap().item()
        };
        let l1 = eval(&gts);
        let mut shuffled = gts.clone();
        shuffled.reverse();
        let l2 = eval(&shuffled);
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_checks_out() {
        use crate::tensorcore::gradcheck::{check_gradient, DEFAULT_STEP, DEFAULT_TOLERANCE};
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let gts = vec![
            GtObject { class_id: 1, box_cxcywh: [0.3, 0.4, 0.2, 0.2] },
            GtObject { class_id: 0, box_cxcywh: [0.7, 0.6, 0.25, 0.3] },
        ];
        let logits0 = Tensor::rand_uniform(vec![4, 3], -1.0, 1.0, &mut rng);
        let boxes0 = Tensor::rand_uniform(vec![4, 4], 0.05, 0.95, &mut rng);
        // Fix the assignment from the base point; the loss is then a smooth
        // function of logits and boxes.
        let costs = matching_costs(&logits0, &boxes0, &gts, 2, 5.0).unwrap();
        let assign = hungarian_match(&costs).unwrap();
        let report = check_gradient(
            &|g: &Graph, inp: &[Tensor]| set_loss(g, &inp[0], &inp[1], &gts, &assign, 2, 5.0),
            &[logits0, boxes0],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.passes(DEFAULT_TOLERANCE), "max rel err {}", report.max_rel_err);
    }
}
