//! Detection metrics: IoU, per-class average precision at a fixed IoU
//! threshold, and mAP over the classes present in ground truth.
//!
//! AP uses confidence-descending greedy matching (stable ties by detection
//! index, each ground truth matched at most once) and all-point
//! interpolation of the precision envelope.

use std::collections::BTreeMap;

/// Axis-aligned box as [x1, y1, x2, y2].
pub type BoxXyxy = [f64; 4];

/// Intersection over union of two boxes; zero when the union is empty.
pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let aw = (a[2] - a[0]).max(0.0);
    let ah = (a[3] - a[1]).max(0.0);
    let bw = (b[2] - b[0]).max(0.0);
    let bh = (b[3] - b[1]).max(0.0);
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let union = aw * ah + bw * bh - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// A scored detection attributed to one image.
#[derive(Debug, Clone)]
pub struct EvalDet {
    pub image_id: usize,
    pub class_id: usize,
    pub confidence: f64,
    pub bbox: BoxXyxy,
}

/// A ground-truth box attributed to one image.
#[derive(Debug, Clone)]
pub struct EvalGt {
    pub image_id: usize,
    pub class_id: usize,
    pub bbox: BoxXyxy,
}

/// Average precision of one class. `None` when the class has no ground
/// truths (it is then excluded from mAP).
pub fn average_precision(
    dets: &[EvalDet],
    gts: &[EvalGt],
    class_id: usize,
    iou_threshold: f64,
) -> Option<f64> {
    // Ground truths of this class, grouped per image.
    let mut gt_by_image: BTreeMap<usize, Vec<&EvalGt>> = BTreeMap::new();
    let mut total_gt = 0usize;
    for gt in gts.iter().filter(|g| g.class_id == class_id) {
        gt_by_image.entry(gt.image_id).or_default().push(gt);
        total_gt += 1;
    }
    if total_gt == 0 {
        return None;
    }

    let mut class_dets: Vec<(usize, &EvalDet)> = dets
        .iter()
        .enumerate()
        .filter(|(_, d)| d.class_id == class_id)
        .collect();
    // Stable sort keeps the original detection index as the tie-break.
    class_dets.sort_by(|a, b| b.1.confidence.partial_cmp(&a.1.confidence).unwrap());

    let mut matched: BTreeMap<usize, Vec<bool>> = gt_by_image
        .iter()
        .map(|(&img, v)| (img, vec![false; v.len()]))
        .collect();

    let mut tp = Vec::with_capacity(class_dets.len());
    for (_, det) in &class_dets {
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = gt_by_image.get(&det.image_id) {
            let taken = matched.get(&det.image_id).unwrap();
            for (gi, gt) in cands.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                let v = iou(&det.bbox, &gt.bbox);
                if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                matched.get_mut(&det.image_id).unwrap()[gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }

    if tp.is_empty() {
        return Some(0.0);
    }

    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut tp_cum = 0usize;
    for (k, &is_tp) in tp.iter().enumerate() {
        if is_tp {
            tp_cum += 1;
        }
        precision.push(tp_cum as f64 / (k + 1) as f64);
        recall.push(tp_cum as f64 / total_gt as f64);
    }
    // Precision envelope from the right, then sum over recall increments.
    for k in (0..precision.len() - 1).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..precision.len() {
        if recall[k] > prev_recall {
            ap += (recall[k] - prev_recall) * precision[k];
            prev_recall = recall[k];
        }
    }
    Some(ap)
}

/// Per-class AP over the classes present in ground truth, plus their mean.
pub fn mean_average_precision(
    dets: &[EvalDet],
    gts: &[EvalGt],
    num_classes: usize,
    iou_threshold: f64,
) -> (BTreeMap<usize, f64>, f64) {
    let mut per_class = BTreeMap::new();
    for class_id in 0..num_classes {
        if let Some(ap) = average_precision(dets, gts, class_id, iou_threshold) {
            per_class.insert(class_id, ap);
        }
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    (per_class, map)
}

/// Convert a normalized cx/cy/w/h box to xyxy.
pub fn cxcywh_to_xyxy(b: &[f64; 4]) -> BoxXyxy {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

/// Convert a pixel x/y/w/h box to xyxy in the same units.
pub fn xywh_to_xyxy(b: &[f64; 4]) -> BoxXyxy {
    [b[0], b[1], b[0] + b[2], b[1] + b[3]]
}
