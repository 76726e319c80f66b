//! Grid-proposal inference, dataset evaluation and heatmap export.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::contour::{decode_heatmaps, encode_heatmaps, BinaryMask};
use crate::error::{Error, Result};
use crate::geometry::{apply_deltas, Rect};
use crate::metrics::{
    coco_thresholds, contour_only_eval, keypoint_pck, mask_ap, EvalReport, GroundTruth, MaskPrediction, PointPrediction,
};
use crate::model::{network_input, roi_extract, Design, Model, FEATURE_STRIDE};
use crate::synth::{SceneRecord, ShapeKind};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Side lengths of the square candidate boxes.
    pub scales: Vec<f64>,
    /// Spacing of candidate centers in pixels.
    pub stride: f64,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    /// PCK radius as a fraction of the ground-truth box diagonal.
    pub pck_fraction: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            scales: vec![24.0, 40.0, 64.0],
            stride: 8.0,
            score_threshold: 0.5,
            nms_iou: 0.5,
            max_detections: 100,
            pck_fraction: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Rect,
    pub class_id: usize,
    pub score: f64,
    /// Full-image mask, set only inside `bbox`.
    pub mask: BinaryMask,
    /// Mask probabilities on the head's grid.
    pub mask_probs: Tensor,
    /// Decoded keypoints (boundary points, then the center when enabled).
    pub keypoints: Option<Vec<(f64, f64)>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub image_id: u64,
    /// Sorted by descending score.
    pub detections: Vec<Detection>,
}

/// Square candidate boxes of every scale whose extent lies in the image.
pub fn grid_candidates(height: usize, width: usize, config: &InferenceConfig) -> Vec<Rect> {
    let mut out = Vec::new();
    for &s in &config.scales {
        let mut cy = s / 2.0 - 0.5;
        while cy + s / 2.0 <= height as f64 - 0.5 + 1e-9 {
            let mut cx = s / 2.0 - 0.5;
            while cx + s / 2.0 <= width as f64 - 0.5 + 1e-9 {
                out.push(Rect::from_center(cy, cx, s, s));
                cx += config.stride;
            }
            cy += config.stride;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Greedy suppression in descending score order; returns kept indices.
pub fn nms(boxes: &[Rect], scores: &[f64], iou: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou) {
            keep.push(i);
        }
    }
    keep
}

/// Pastes an `N×N` probability grid registered to `region` into a
/// full-image mask, thresholding bilinear samples at 0.5.
pub fn paste_mask(probs: &[f64], n: usize, region: &Rect, height: usize, width: usize) -> BinaryMask {
    let mut mask = BinaryMask::new(height, width);
    let r0 = region.top.ceil().max(0.0) as usize;
    let c0 = region.left.ceil().max(0.0) as usize;
    let r1 = (region.bottom().floor().max(-1.0) as isize).min(height as isize - 1);
    let c1 = (region.right().floor().max(-1.0) as isize).min(width as isize - 1);
    let coord = |p: f64, start: f64, extent: f64| -> (usize, usize, f64) {
        let u = ((p - start) / extent * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = u.floor() as usize;
        (lo, (lo + 1).min(n - 1), u - lo as f64)
    };
    for r in r0 as isize..=r1 {
        let (y0, y1, fy) = coord(r as f64, region.top, region.height);
        for c in c0 as isize..=c1 {
            let (x0, x1, fx) = coord(c as f64, region.left, region.width);
            let p = (1.0 - fy) * ((1.0 - fx) * probs[y0 * n + x0] + fx * probs[y0 * n + x1])
                + fy * ((1.0 - fx) * probs[y1 * n + x0] + fx * probs[y1 * n + x1]);
            if p >= 0.5 {
                mask.set(r as usize, c as usize, true);
            }
        }
    }
    mask
}

struct Scored {
    bbox: Rect,
    class_id: usize,
    score: f64,
}

fn score_candidates(
    model: &Model,
    features: &Tensor,
    candidates: &[Rect],
    height: usize,
    width: usize,
    config: &InferenceConfig,
) -> Result<Vec<Scored>> {
    let s = model.config.roi_size;
    let c = model.config.num_classes;
    let mut out = Vec::new();
    for chunk in candidates.chunks(128) {
        let mut data = Vec::new();
        for b in chunk {
            data.extend(roi_extract(features, b, s, FEATURE_STRIDE as f64)?.into_data());
        }
        let dim = data.len() / chunk.len();
        let mut g = Graph::new(&model.params);
        let x = g.input(Tensor::new(vec![chunk.len(), dim], data)?);
        let (cls, bbox) = model.box_head(&mut g, x)?;
        for (i, cand) in chunk.iter().enumerate() {
            let logits = &g.value(cls).data()[i * (c + 1)..(i + 1) * (c + 1)];
            let probs = softmax(logits);
            let (class_id, &score) = probs[..c]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("at least one class");
            if score <= config.score_threshold {
                continue;
            }
            let deltas = &g.value(bbox).data()[i * 4 * c + 4 * class_id..i * 4 * c + 4 * class_id + 4];
            let refined = apply_deltas(cand, deltas).clip(height as f64, width as f64);
            if refined.height < 1.0 || refined.width < 1.0 {
                continue;
            }
            out.push(Scored {
                bbox: refined,
                class_id,
                score,
            });
        }
    }
    Ok(out)
}

/// Detects objects in an `[H, W, 3]` (or `[3, H, W]`) image.
pub fn infer(model: &Model, image: &Tensor, config: &InferenceConfig) -> Result<DetectionResult> {
    let chw = network_input(image)?;
    let (_, height, width) = chw.chw()?;
    let features = model.backbone_forward(&chw)?;
    let candidates = grid_candidates(height, width, config);
    let scored = score_candidates(model, &features, &candidates, height, width, config)?;
    let boxes: Vec<Rect> = scored.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = scored.iter().map(|d| d.score).collect();
    let mut keep = nms(&boxes, &scores, config.nms_iou);
    keep.truncate(config.max_detections);

    let mut detections = Vec::with_capacity(keep.len());
    for i in keep {
        let d = &scored[i];
        let roi = roi_extract(&features, &d.bbox, model.config.roi_size, FEATURE_STRIDE as f64)?;
        let mut g = Graph::new(&model.params);
        let x = g.input(roi);
        let heads = model.roi_heads(&mut g, x, model.has_keypoint_head())?;
        let mut fused = g.value(heads.fused_mask_logits).clone();
        if model.fuses() && model.fusion.design == Design::C && model.config.design_c_report_28 {
            let pooled = g.avgpool2(heads.fused_mask_logits)?;
            fused = g.value(pooled).clone();
        }
        let (_, n, _) = fused.chw()?;
        let plane = &fused.data()[d.class_id * n * n..(d.class_id + 1) * n * n];
        let probs: Vec<f64> = plane.iter().map(|&v| sigmoid(v)).collect();
        let mask = paste_mask(&probs, n, &d.bbox, height, width);
        let keypoints = heads
            .keypoint_logits
            .map(|kp| decode_heatmaps(g.value(kp), &d.bbox))
            .transpose()?;
        detections.push(Detection {
            bbox: d.bbox,
            class_id: d.class_id,
            score: d.score,
            mask,
            mask_probs: Tensor::new(vec![n, n], probs)?,
            keypoints,
        });
    }
    Ok(DetectionResult {
        image_id: 0,
        detections,
    })
}

fn ground_truths(scenes: &[SceneRecord]) -> Vec<GroundTruth> {
    scenes
        .iter()
        .flat_map(|s| {
            s.instances.iter().map(|a| GroundTruth {
                image_id: s.scene_id,
                class_id: a.class_id,
                mask: a.mask.clone(),
            })
        })
        .collect()
}

/// Mask AP, keypoint PCK and contour-only AP of `model` on `scenes`.
pub fn evaluate(model: &Model, scenes: &[SceneRecord], config: &InferenceConfig) -> Result<EvalReport> {
    let mut masks = Vec::new();
    let mut polygons = Vec::new();
    let mut pck_sum = 0.0;
    let mut pck_count = 0usize;
    for scene in scenes {
        let result = infer(model, &scene.image, config)?;
        for d in &result.detections {
            masks.push(MaskPrediction {
                image_id: scene.scene_id,
                class_id: d.class_id,
                score: d.score,
                mask: d.mask.clone(),
            });
            if let Some(kp) = &d.keypoints {
                let boundary = &kp[..model.fusion.k.min(kp.len())];
                if boundary.len() >= 3 {
                    polygons.push(PointPrediction {
                        image_id: scene.scene_id,
                        class_id: d.class_id,
                        score: d.score,
                        points: boundary.to_vec(),
                    });
                }
            }
        }
        for gt in &scene.instances {
            let Some(labels) = &gt.contour_points else { continue };
            pck_count += 1;
            let best = result
                .detections
                .iter()
                .filter(|d| d.keypoints.is_some())
                .map(|d| (d.mask.iou(&gt.mask), d))
                .filter(|(iou, _)| *iou >= 0.5)
                .max_by(|a, b| a.0.total_cmp(&b.0));
            if let Some((_, d)) = best {
                let radius = config.pck_fraction * gt.bbox.diagonal();
                let pred = d.keypoints.as_ref().expect("filtered");
                pck_sum += keypoint_pck(pred, &labels.keypoints(), radius)?;
            }
        }
    }
    let truths = ground_truths(scenes);
    let thresholds = coco_thresholds();
    let ap = mask_ap(&masks, &truths, &thresholds);
    let contour = contour_only_eval(&polygons, &truths, &thresholds)?;
    Ok(EvalReport {
        mask_ap: ap.ap,
        ap50: ap.ap50,
        keypoint_pck: if pck_count == 0 {
            0.0
        } else {
            pck_sum / pck_count as f64
        },
        contour_only_ap: contour.ap,
        contour_only_ap50: contour.ap50,
        per_class: ap.per_class,
    })
}

/// Boundary points decoded from ground-truth heatmaps registered to each
/// ground-truth box, with the matching ground truths. Restricted to convex
/// shape classes when `convex_only`.
pub fn gt_heatmap_contours(
    scenes: &[SceneRecord],
    resolution: usize,
    convex_only: bool,
) -> Result<(Vec<PointPrediction>, Vec<GroundTruth>)> {
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for scene in scenes {
        for (i, gt) in scene.instances.iter().enumerate() {
            if convex_only && !ShapeKind::for_class(gt.class_id).is_convex() {
                continue;
            }
            let labels = gt.contour_points.as_ref().ok_or(Error::MissingLabels(i))?;
            let grid = encode_heatmaps(&labels.points, &gt.bbox, resolution)?.to_tensor();
            preds.push(PointPrediction {
                image_id: scene.scene_id,
                class_id: gt.class_id,
                score: 1.0,
                points: decode_heatmaps(&grid, &gt.bbox)?,
            });
            truths.push(GroundTruth {
                image_id: scene.scene_id,
                class_id: gt.class_id,
                mask: gt.mask.clone(),
            });
        }
    }
    Ok((preds, truths))
}

/// Min-max normalizes to `[0, 1]` (all zeros for a constant map) and
/// renders higher values darker.
pub fn normalize_for_display(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| {
            let n = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
            (255.0 * (1.0 - n)).round() as u8
        })
        .collect()
}

fn write_gray(values: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_raw(w as u32, h as u32, normalize_for_display(values)).expect("sized");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// For every detection writes `det{i}_keypoints.png` (channel-summed
/// keypoint map) and `det{i}_mask.png` (mask logits of the detected class).
pub fn export_heatmaps(
    model: &Model,
    image: &Tensor,
    out_dir: impl AsRef<Path>,
    config: &InferenceConfig,
) -> Result<Vec<(PathBuf, PathBuf)>> {
    if !model.has_keypoint_head() {
        return Err(Error::Config("heatmap export needs the keypoint head".into()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let chw = network_input(image)?;
    let features = model.backbone_forward(&chw)?;
    let result = infer(model, image, config)?;
    let mut written = Vec::new();
    for (i, d) in result.detections.iter().enumerate() {
        let roi = roi_extract(&features, &d.bbox, model.config.roi_size, FEATURE_STRIDE as f64)?;
        let mut g = Graph::new(&model.params);
        let x = g.input(roi);
        let kp = model.keypoint_head(&mut g, x)?;
        let ok = model.keypoint_summary(&mut g, kp)?;
        let mask = model.mask_head(&mut g, x)?;
        let (_, kh, kw) = g.value(ok).chw()?;
        let (_, mh, mw) = g.value(mask).chw()?;
        let plane = &g.value(mask).data()[d.class_id * mh * mw..(d.class_id + 1) * mh * mw];
        let kp_path = out_dir.join(format!("det{i:02}_keypoints.png"));
        let mask_path = out_dir.join(format!("det{i:02}_mask.png"));
        write_gray(g.value(ok).data(), kh, kw, &kp_path)?;
        write_gray(plane, mh, mw, &mask_path)?;
        written.push((kp_path, mask_path));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_normalization() {
        assert_eq!(normalize_for_display(&[2.0, 2.0, 2.0]), vec![255, 255, 255]);
        let v = normalize_for_display(&[-1.0, 0.5, 3.0]);
        assert_eq!((v[0], v[2]), (255, 0));
    }

    #[test]
    fn nms_keeps_best_of_overlapping() {
        let boxes = [
            Rect::new(0.0, 0.0, 10.0, 10.0),
            Rect::new(1.0, 1.0, 10.0, 10.0),
            Rect::new(30.0, 30.0, 5.0, 5.0),
        ];
        assert_eq!(nms(&boxes, &[0.6, 0.9, 0.7], 0.5), vec![1, 2]);
    }

    #[test]
    fn pasted_mask_stays_in_box() {
        let region = Rect::new(10.5, 20.5, 8.0, 6.0);
        let m = paste_mask(&[1.0; 16], 4, &region, 40, 40);
        assert_eq!(m.count(), 48);
        assert_eq!(m.bbox().unwrap(), region);
    }

    #[test]
    fn grid_covers_image() {
        let cands = grid_candidates(128, 128, &InferenceConfig::default());
        assert_eq!(cands.len(), 14 * 14 + 12 * 12 + 9 * 9);
        assert!(cands.iter().all(|b| b.top >= -0.5 && b.bottom() <= 127.5 + 1e-9));
    }
}
