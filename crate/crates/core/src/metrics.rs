//! COCO-style mask AP, keypoint PCK and contour-only segmentation scoring.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::contour::{points_to_mask, BinaryMask};
use crate::error::{Error, Result};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Detections per image and class considered by [`mask_ap`].
pub const MAX_DETS: usize = 100;

/// A scored instance mask in full-image coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction {
    pub image_id: u64,
    pub class_id: usize,
    pub score: f64,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub image_id: u64,
    pub class_id: usize,
    pub mask: BinaryMask,
}

/// Scored ordered polygon for contour-only evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PointPrediction {
    pub image_id: u64,
    pub class_id: usize,
    pub score: f64,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    /// Mean over the requested thresholds and over classes with ground truth.
    pub ap: f64,
    /// AP at IoU 0.5; 0 when 0.5 is not among the thresholds.
    pub ap50: f64,
    /// Per-class AP averaged over thresholds.
    pub per_class: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mask_ap: f64,
    pub ap50: f64,
    pub keypoint_pck: f64,
    pub contour_only_ap: f64,
    pub contour_only_ap50: f64,
    pub per_class: BTreeMap<usize, f64>,
}

/// 101-point interpolated AP for one class at one threshold, given the
/// per-detection true-positive flags in descending score order.
fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    total / 101.0
}

struct ClassData {
    /// (score, image, IoU with each same-class truth of that image)
    dets: Vec<(f64, u64, Vec<f64>)>,
    num_gt: usize,
}

/// COCO-style mask AP with greedy per-image one-to-one matching.
/// Classes without ground truth are excluded from the mean.
pub fn mask_ap(predictions: &[MaskPrediction], truths: &[GroundTruth], thresholds: &[f64]) -> ApSummary {
    let mut classes: BTreeMap<usize, ClassData> = BTreeMap::new();
    for gt in truths {
        classes
            .entry(gt.class_id)
            .or_insert_with(|| ClassData {
                dets: Vec::new(),
                num_gt: 0,
            })
            .num_gt += 1;
    }

    // Group predictions by (class, image), keep the top MAX_DETS by score.
    let mut groups: BTreeMap<(usize, u64), Vec<&MaskPrediction>> = BTreeMap::new();
    for p in predictions {
        groups.entry((p.class_id, p.image_id)).or_default().push(p);
    }
    for ((class, image), mut preds) in groups {
        let Some(data) = classes.get_mut(&class) else {
            continue;
        };
        preds.sort_by(|a, b| b.score.total_cmp(&a.score));
        preds.truncate(MAX_DETS);
        let gts: Vec<&GroundTruth> = truths
            .iter()
            .filter(|g| g.class_id == class && g.image_id == image)
            .collect();
        for p in preds {
            let ious = gts.iter().map(|g| p.mask.iou(&g.mask)).collect();
            data.dets.push((p.score, image, ious));
        }
    }

    let mut per_class = BTreeMap::new();
    let mut ap50_sum = 0.0;
    let mut ap_sum = 0.0;
    let has50 = thresholds.iter().position(|&t| (t - 0.5).abs() < 1e-12);
    for (&class, data) in classes.iter_mut() {
        // Stable sort keeps image order among equal scores.
        data.dets.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut class_total = 0.0;
        for (ti, &thr) in thresholds.iter().enumerate() {
            let mut taken: BTreeMap<u64, Vec<bool>> = BTreeMap::new();
            let tp: Vec<bool> = data
                .dets
                .iter()
                .map(|(_, image, ious)| {
                    let used = taken.entry(*image).or_insert_with(|| vec![false; ious.len()]);
                    let mut best: Option<usize> = None;
                    let mut best_iou = thr;
                    for (j, &iou) in ious.iter().enumerate() {
                        if !used[j] && iou >= best_iou && (best.is_none() || iou > best_iou) {
                            best_iou = iou;
                            best = Some(j);
                        }
                    }
                    if let Some(j) = best {
                        used[j] = true;
                        true
                    } else {
                        false
                    }
                })
                .collect();
            let ap = interpolated_ap(&tp, data.num_gt);
            class_total += ap;
            if has50 == Some(ti) {
                ap50_sum += ap;
            }
        }
        let class_ap = if thresholds.is_empty() {
            0.0
        } else {
            class_total / thresholds.len() as f64
        };
        ap_sum += class_ap;
        per_class.insert(class, class_ap);
    }
    let n = classes.len();
    if n == 0 {
        return ApSummary::default();
    }
    ApSummary {
        ap: ap_sum / n as f64,
        ap50: if has50.is_some() { ap50_sum / n as f64 } else { 0.0 },
        per_class,
    }
}

/// Fraction of predicted points within `radius` of the ground-truth point
/// with the same index.
pub fn keypoint_pck(pred: &[(f64, f64)], truth: &[(f64, f64)], radius: f64) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Count {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let hits = pred
        .iter()
        .zip(truth)
        .filter(|(p, t)| (p.0 - t.0).hypot(p.1 - t.1) <= radius)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Rasterizes each predicted polygon and scores it with [`mask_ap`].
pub fn contour_only_eval(
    predictions: &[PointPrediction],
    truths: &[GroundTruth],
    thresholds: &[f64],
) -> Result<ApSummary> {
    let masks = predictions
        .iter()
        .map(|p| {
            let (h, w) = truths
                .iter()
                .find(|g| g.image_id == p.image_id)
                .map(|g| (g.mask.height(), g.mask.width()))
                .unwrap_or_else(|| polygon_extent(&p.points));
            Ok(MaskPrediction {
                image_id: p.image_id,
                class_id: p.class_id,
                score: p.score,
                mask: points_to_mask(&p.points, h, w)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mask_ap(&masks, truths, thresholds))
}

fn polygon_extent(points: &[(f64, f64)]) -> (usize, usize) {
    let h = points.iter().map(|p| p.0).fold(0.0, f64::max);
    let w = points.iter().map(|p| p.1).fold(0.0, f64::max);
    (h.max(0.0) as usize + 2, w.max(0.0) as usize + 2)
}
