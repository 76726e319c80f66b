//! Training-time proposals (jittered ground-truth boxes plus negatives) and
//! per-proposal targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contour::{encode_heatmaps, BinaryMask};
use crate::error::{Error, Result};
use crate::geometry::{encode_deltas, Rect};
use crate::model::{Design, FusionConfig, MASK_RESOLUTION};
use crate::synth::InstanceAnnotation;
use crate::tensor::Tensor;

/// Below this IoU with every ground-truth box a proposal is background.
pub const FG_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    /// Jittered copies per ground-truth box.
    pub per_gt: usize,
    pub negatives: usize,
    /// Maximum center shift as a fraction of box size.
    pub shift: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Draws per jittered copy before falling back to the ground-truth box.
    pub redraws: usize,
    /// Attempts per negative before it is skipped.
    pub negative_attempts: usize,
    /// Fraction of negatives drawn as heavily displaced ground-truth boxes
    /// rather than uniformly over the image.
    pub hard_negative_fraction: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            per_gt: 2,
            negatives: 6,
            shift: 0.15,
            scale_min: 0.85,
            scale_max: 1.18,
            redraws: 50,
            negative_attempts: 200,
            hard_negative_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub boxes: Vec<Rect>,
    /// Class of the matched ground truth, `None` for background.
    pub labels: Vec<Option<usize>>,
    pub matched_gt: Vec<Option<usize>>,
    pub jitter_seed: u64,
    /// Negatives that could not be placed.
    pub skipped: usize,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn num_foreground(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

fn max_iou(b: &Rect, gts: &[Rect]) -> f64 {
    gts.iter().map(|g| b.iou(g)).fold(0.0, f64::max)
}

fn jitter(rng: &mut ChaCha8Rng, gt: &Rect, shift: f64, scale: (f64, f64)) -> Rect {
    let (cy, cx) = gt.center();
    let mut draw = |lo: f64, hi: f64| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let dy = draw(-shift, shift) * gt.height;
    let dx = draw(-shift, shift) * gt.width;
    let sh = draw(scale.0, scale.1);
    let sw = draw(scale.0, scale.1);
    Rect::from_center(cy + dy, cx + dx, gt.height * sh, gt.width * sw)
}

/// Jittered ground-truth copies (IoU ≥ 0.5 with their source) followed by
/// background boxes (IoU < 0.5 with every ground truth).
pub fn sample_proposals(
    gt_boxes: &[Rect],
    gt_classes: &[usize],
    image_size: (usize, usize),
    config: &ProposalConfig,
    seed: u64,
) -> Result<ProposalSet> {
    if gt_boxes.len() != gt_classes.len() {
        return Err(Error::Shape("one class per ground-truth box".into()));
    }
    if config.per_gt == 0 {
        return Err(Error::Config("per_gt must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ProposalSet {
        boxes: Vec::new(),
        labels: Vec::new(),
        matched_gt: Vec::new(),
        jitter_seed: seed,
        skipped: 0,
    };
    let scale = (config.scale_min, config.scale_max);
    for (i, gt) in gt_boxes.iter().enumerate() {
        for _ in 0..config.per_gt {
            let b = (0..config.redraws.max(1))
                .map(|_| jitter(&mut rng, gt, config.shift, scale))
                .find(|b| b.iou(gt) >= FG_IOU)
                .unwrap_or(*gt);
            set.boxes.push(b);
            set.labels.push(Some(gt_classes[i]));
            set.matched_gt.push(Some(i));
        }
    }

    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    let min_side = 8.0f64.min(h).min(w);
    for n in 0..config.negatives {
        let hard = !gt_boxes.is_empty() && (n as f64) < config.hard_negative_fraction * config.negatives as f64;
        let mut placed = None;
        for _ in 0..config.negative_attempts {
            let b = if hard {
                let gt = &gt_boxes[rng.gen_range(0..gt_boxes.len())];
                jitter(&mut rng, gt, 0.6, (0.5, 2.0))
            } else {
                let bh = rng.gen_range(min_side..=h * 0.6);
                let bw = rng.gen_range(min_side..=w * 0.6);
                let top = rng.gen_range(-0.5..=h - 0.5 - bh);
                let left = rng.gen_range(-0.5..=w - 0.5 - bw);
                Rect::new(top, left, bh, bw)
            };
            let b = b.clip(h, w);
            if b.height >= 2.0 && b.width >= 2.0 && max_iou(&b, gt_boxes) < FG_IOU {
                placed = Some(b);
                break;
            }
        }
        match placed {
            Some(b) => {
                set.boxes.push(b);
                set.labels.push(None);
                set.matched_gt.push(None);
            }
            None => set.skipped += 1,
        }
    }
    if set.skipped > 0 {
        log::warn!("skipped {} negative proposals", set.skipped);
    }
    Ok(set)
}

/// What one proposal is trained towards.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiTarget {
    pub proposal: Rect,
    /// `num_classes` for background.
    pub class: usize,
    pub box_deltas: Option<[f64; 4]>,
    /// Row-major binary grid at the mask-loss resolution.
    pub mask: Option<Vec<bool>>,
    /// `[k(+1), M, M]` one-hot keypoint grid.
    pub heatmap: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetSet {
    pub rois: Vec<RoiTarget>,
    /// Contour points moved onto the proposal boundary.
    pub clamped: usize,
}

/// Nearest pixel to coordinate `v`. A coordinate on a pixel edge goes to
/// the pixel on the side of `center`, which keeps targets mirror-symmetric.
fn nearest_pixel(v: f64, center: f64) -> isize {
    let t = v + 0.5;
    let edge = t.round();
    if (t - edge).abs() < 1e-9 {
        edge as isize - isize::from(v >= center)
    } else {
        t.floor() as isize
    }
}

/// Nearest-neighbor sample of `mask` on an `n×n` grid of cell centers over
/// `region`; pixels outside the image read as background.
pub fn mask_target(mask: &BinaryMask, region: &Rect, n: usize) -> Vec<bool> {
    let (cy, cx) = region.center();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let y = region.top + (i as f64 + 0.5) * region.height / n as f64;
        let r = nearest_pixel(y, cy);
        for j in 0..n {
            let x = region.left + (j as f64 + 0.5) * region.width / n as f64;
            out.push(mask.get_signed(r, nearest_pixel(x, cx)));
        }
    }
    out
}

/// Nearest-neighbor 2× enlargement of a square grid.
pub fn upsample2(grid: &[bool], n: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(4 * n * n);
    for i in 0..2 * n {
        for j in 0..2 * n {
            out.push(grid[(i / 2) * n + j / 2]);
        }
    }
    out
}

/// Builds per-proposal targets. `keypoints` requests heatmap targets (the
/// keypoint loss is active); `num_classes` is the background index.
pub fn assign_targets(
    proposals: &ProposalSet,
    annotations: &[InstanceAnnotation],
    fusion: &FusionConfig,
    num_classes: usize,
    keypoints: bool,
) -> Result<TargetSet> {
    let mut clamped = 0;
    let mut rois = Vec::with_capacity(proposals.len());
    for (idx, b) in proposals.boxes.iter().enumerate() {
        let Some(gi) = proposals.matched_gt[idx] else {
            rois.push(RoiTarget {
                proposal: *b,
                class: num_classes,
                box_deltas: None,
                mask: None,
                heatmap: None,
            });
            continue;
        };
        let gt = annotations
            .get(gi)
            .ok_or_else(|| Error::Shape(format!("proposal matched to missing annotation {gi}")))?;
        if gt.class_id >= num_classes {
            return Err(Error::Target {
                target: gt.class_id,
                max: num_classes - 1,
            });
        }
        let mut mask = mask_target(&gt.mask, b, MASK_RESOLUTION);
        if fusion.enabled && fusion.design == Design::C {
            mask = upsample2(&mask, MASK_RESOLUTION);
        }
        let heatmap = if keypoints {
            let labels = gt.contour_points.as_ref().ok_or(Error::MissingLabels(gi))?;
            if labels.k != fusion.k || labels.center.is_some() != fusion.use_center {
                return Err(Error::Config(format!(
                    "annotation {gi} carries k = {} (center: {}), model expects k = {} (center: {})",
                    labels.k,
                    labels.center.is_some(),
                    fusion.k,
                    fusion.use_center
                )));
            }
            let points: Vec<(f64, f64)> = labels
                .keypoints()
                .into_iter()
                .map(|(r, c)| {
                    let p = (r.clamp(b.top, b.bottom()), c.clamp(b.left, b.right()));
                    if p != (r, c) {
                        clamped += 1;
                    }
                    p
                })
                .collect();
            Some(encode_heatmaps(&points, b, fusion.keypoint_resolution())?.to_tensor())
        } else {
            None
        };
        rois.push(RoiTarget {
            proposal: *b,
            class: gt.class_id,
            box_deltas: Some(encode_deltas(b, &gt.bbox)),
            mask: Some(mask),
            heatmap,
        });
    }
    if clamped > 0 {
        log::debug!("clamped {clamped} contour points into proposal boxes");
    }
    Ok(TargetSet { rois, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contour::{make_labels, LabelConfig};

    fn annotation() -> InstanceAnnotation {
        let mask = BinaryMask::from_fn(40, 40, |r, c| {
            (10..26).contains(&r) && (6..30).contains(&c) && r + c > 20
        });
        let mut a = InstanceAnnotation::from_mask(2, mask).unwrap();
        a.contour_points = Some(
            make_labels(
                &a.mask,
                &LabelConfig {
                    k: 8,
                    ..LabelConfig::default()
                },
            )
            .unwrap(),
        );
        a
    }

    #[test]
    fn identity_jitter_reproduces_ground_truth() {
        let gt = Rect::new(3.5, 4.5, 10.0, 12.0);
        let cfg = ProposalConfig {
            per_gt: 1,
            negatives: 0,
            shift: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            ..ProposalConfig::default()
        };
        let p = sample_proposals(&[gt], &[1], (32, 32), &cfg, 4).unwrap();
        assert_eq!(p.boxes, vec![gt]);
        assert_eq!(p.labels, vec![Some(1)]);
    }

    #[test]
    fn proposals_respect_iou_rules_and_seed() {
        let gts = [Rect::new(10.5, 10.5, 20.0, 30.0), Rect::new(60.5, 50.5, 25.0, 25.0)];
        let cfg = ProposalConfig {
            per_gt: 5,
            negatives: 10,
            ..ProposalConfig::default()
        };
        let p = sample_proposals(&gts, &[0, 3], (128, 128), &cfg, 11).unwrap();
        assert_eq!(p.num_foreground(), 10);
        for (i, b) in p.boxes.iter().enumerate() {
            match p.matched_gt[i] {
                Some(g) => assert!(b.iou(&gts[g]) >= FG_IOU),
                None => assert!(gts.iter().all(|g| b.iou(g) < FG_IOU)),
            }
        }
        assert_eq!(p, sample_proposals(&gts, &[0, 3], (128, 128), &cfg, 11).unwrap());
    }

    #[test]
    fn targets_for_exact_and_background_proposals() {
        let a = annotation();
        let proposals = ProposalSet {
            boxes: vec![a.bbox, Rect::new(0.0, 0.0, 5.0, 5.0)],
            labels: vec![Some(2), None],
            matched_gt: vec![Some(0), None],
            jitter_seed: 0,
            skipped: 0,
        };
        let fusion = FusionConfig {
            k: 8,
            ..FusionConfig::default()
        };
        let t = assign_targets(&proposals, std::slice::from_ref(&a), &fusion, 4, true).unwrap();
        let fg = &t.rois[0];
        assert_eq!(fg.box_deltas, Some([0.0; 4]));
        assert_eq!(fg.class, 2);
        assert_eq!(fg.mask.as_ref().unwrap(), &mask_target(&a.mask, &a.bbox, 28));
        let hm = fg.heatmap.as_ref().unwrap();
        assert_eq!(hm.shape(), &[9, 56, 56]);
        assert_eq!(hm.sum(), 9.0);
        assert_eq!(t.clamped, 0);
        let bg = &t.rois[1];
        assert_eq!(
            (bg.class, bg.box_deltas, bg.mask.is_none(), bg.heatmap.is_none()),
            (4, None, true, true)
        );

        let mut bare = a;
        bare.contour_points = None;
        assert!(matches!(
            assign_targets(&proposals, &[bare], &fusion, 4, true),
            Err(Error::MissingLabels(0))
        ));
    }

    #[test]
    fn mask_target_of_tight_box_is_a_downsample() {
        // Box of 56 pixels maps two pixels onto each cell; cell centers fall
        // on pixel boundaries and take the pixel nearer the box center.
        let mask = BinaryMask::from_fn(60, 60, |r, c| {
            (2..58).contains(&r) && (2..58).contains(&c) && (r + c) % 3 == 0
        });
        let b = Rect::new(1.5, 1.5, 56.0, 56.0);
        let t = mask_target(&mask, &b, 28);
        let pixel = |i: usize| if i < 14 { 3 + 2 * i } else { 2 + 2 * i };
        for i in 0..28 {
            for j in 0..28 {
                assert_eq!(t[i * 28 + j], mask.get(pixel(i), pixel(j)));
            }
        }
    }
}
