//! Joint training of all heads with SGD, plus inference, evaluation and the
//! ablation runner.

mod ablation;
mod infer;
mod proposals;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation, AblationGrid, AblationRow, AblationTable, SweepAxis};
pub use infer::{
    evaluate, export_heatmaps, gt_heatmap_contours, infer, normalize_for_display, Detection, DetectionResult,
    InferenceConfig,
};
pub use proposals::{
    assign_targets, mask_target, sample_proposals, upsample2, ProposalConfig, ProposalSet, RoiTarget, TargetSet, FG_IOU,
};

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::losses::{
    loss_box_with_grad, loss_keypoint_with_grad, loss_mask_with_grad, softmax_cross_entropy, total_loss, LossBreakdown,
};
use crate::model::{network_input, FusionConfig, Model, ModelConfig};
use crate::synth::SceneRecord;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_images: usize,
    pub iterations: usize,
    /// Fraction of `iterations` after which the rate is multiplied by
    /// `lr_drop_factor`.
    pub lr_drop_fraction: f64,
    pub lr_drop_factor: f64,
    pub flip_prob: f64,
    pub fusion: FusionConfig,
    pub model: ModelConfig,
    pub proposals: ProposalConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_images: 4,
            iterations: 800,
            lr_drop_fraction: 0.75,
            lr_drop_factor: 0.1,
            flip_prob: 0.5,
            fusion: FusionConfig::default(),
            model: ModelConfig::default(),
            proposals: ProposalConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Keypoint loss weight used for COCO-style training.
    pub const COCO_ALPHA: f64 = 0.1;

    /// Settings for a single-CPU run on the synthetic scenes: 16 contour
    /// points, 32-channel layers and a learning rate raised to 0.02, since
    /// nothing here starts from pretrained weights.
    pub fn desk() -> Self {
        let mut config = Self {
            learning_rate: 0.02,
            ..Self::default()
        };
        config.fusion.k = 16;
        config.model.backbone_channels = 32;
        config.model.mask_channels = 32;
        config.model.keypoint_channels = 32;
        config
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip_prob must lie in [0, 1]".into()));
        }
        if self.batch_images == 0 {
            return Err(Error::Config("batch_images must be at least 1".into()));
        }
        if self.fusion.enabled && !self.model.keypoint_head {
            return Err(Error::Config("fusion needs the keypoint head".into()));
        }
        if self.keypoint_loss_active() && !self.model.keypoint_head {
            return Err(Error::Config("alpha > 0 needs the keypoint head".into()));
        }
        self.fusion.validate()?;
        self.model.validate()
    }

    /// Learning rate in effect at `iteration` (0-based).
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        let drop_at = (self.lr_drop_fraction * self.iterations as f64).floor() as usize;
        if iteration >= drop_at {
            self.learning_rate * self.lr_drop_factor
        } else {
            self.learning_rate
        }
    }

    /// Whether the keypoint branch is evaluated during training.
    pub fn keypoint_loss_active(&self) -> bool {
        self.fusion.alpha > 0.0
    }
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − η·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        for (id, (v, g)) in params.ids().zip(self.velocity.iter_mut().zip(grads)) {
            let theta = params.get_mut(id);
            for ((t, vi), gi) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + (gi + self.weight_decay * *t);
                *t -= lr * *vi;
            }
        }
    }
}

/// One image of a batch with its sampled proposals and targets.
#[derive(Clone, Debug)]
pub struct BatchItem {
    /// `[3, H, W]`
    pub image: Tensor,
    pub targets: TargetSet,
}

/// Builds a batch item: optional flip, proposals, targets.
pub fn prepare_item(scene: &SceneRecord, flip: bool, config: &TrainConfig, proposal_seed: u64) -> Result<BatchItem> {
    let flipped;
    let scene = if flip {
        flipped = scene.flip_horizontal();
        &flipped
    } else {
        scene
    };
    let boxes: Vec<_> = scene.instances.iter().map(|a| a.bbox).collect();
    let classes: Vec<_> = scene.instances.iter().map(|a| a.class_id).collect();
    let proposals = sample_proposals(
        &boxes,
        &classes,
        (scene.height(), scene.width()),
        &config.proposals,
        proposal_seed,
    )?;
    let targets = assign_targets(
        &proposals,
        &scene.instances,
        &config.fusion,
        config.model.num_classes,
        config.keypoint_loss_active(),
    )?;
    Ok(BatchItem {
        image: network_input(&scene.image)?,
        targets,
    })
}

/// Records the full multi-task loss of a batch on `g`. Returns the root
/// node and the per-term breakdown.
pub fn batch_loss(g: &mut Graph, model: &Model, batch: &[BatchItem], alpha: f64) -> Result<(Var, LossBreakdown)> {
    let keypoints = alpha > 0.0;
    let mut rois = Vec::new();
    let mut targets = Vec::new();
    for item in batch {
        let x = g.input(item.image.clone());
        let features = model.backbone(g, x)?;
        for t in &item.targets.rois {
            rois.push(model.roi_extract(g, features, &t.proposal)?);
            targets.push(t);
        }
    }
    if rois.is_empty() {
        return Err(Error::Config("batch has no proposals".into()));
    }
    let r = rois.len();
    let stacked = g.stack(&rois)?;
    let dim = g.value(stacked).len() / r;
    let flat = g.reshape(stacked, &[r, dim])?;
    let (cls, bbox) = model.box_head(g, flat)?;

    let c1 = model.config.num_classes + 1;
    let mut cls_grad = Tensor::zeros(&[r, c1]);
    let mut l_cls = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let (v, gr) = softmax_cross_entropy(&g.value(cls).data()[i * c1..(i + 1) * c1], t.class)?;
        l_cls += v;
        for (dst, src) in cls_grad.data_mut()[i * c1..(i + 1) * c1].iter_mut().zip(gr) {
            *dst = src / r as f64;
        }
    }
    l_cls /= r as f64;
    let cls_loss = g.loss(cls, l_cls, cls_grad)?;

    let fg: Vec<usize> = (0..r).filter(|&i| targets[i].box_deltas.is_some()).collect();
    let nfg = fg.len();
    let mut terms = vec![(cls_loss, 1.0)];
    let (mut l_box, mut l_mask, mut l_kp) = (0.0, 0.0, 0.0);
    if nfg > 0 {
        let b4 = 4 * model.config.num_classes;
        let mut box_grad = Tensor::zeros(&[r, b4]);
        for &i in &fg {
            let t = targets[i];
            let deltas = t.box_deltas.as_ref().expect("foreground");
            let (v, gr) = loss_box_with_grad(&g.value(bbox).data()[i * b4..(i + 1) * b4], deltas, Some(t.class))?;
            l_box += v;
            for (dst, src) in box_grad.data_mut()[i * b4..(i + 1) * b4].iter_mut().zip(gr) {
                *dst = src / nfg as f64;
            }
        }
        l_box /= nfg as f64;
        terms.push((g.loss(bbox, l_box, box_grad)?, 1.0));

        let w = 1.0 / nfg as f64;
        for &i in &fg {
            let t = targets[i];
            let heads = model.roi_heads(g, rois[i], keypoints)?;
            let mask = t.mask.as_ref().expect("foreground");
            let (v, gr) = loss_mask_with_grad(g.value(heads.fused_mask_logits), mask, t.class)?;
            l_mask += v;
            terms.push((g.loss(heads.fused_mask_logits, v, gr)?, w));
            if keypoints {
                let (Some(kp), Some(label)) = (heads.keypoint_logits, t.heatmap.as_ref()) else {
                    return Err(Error::Config(
                        "keypoint loss requested without keypoint head or labels".into(),
                    ));
                };
                let (v, gr) = loss_keypoint_with_grad(g.value(kp), label)?;
                l_kp += v;
                terms.push((g.loss(kp, v, gr)?, alpha * w));
            }
        }
        l_mask /= nfg as f64;
        l_kp /= nfg as f64;
    }
    let root = g.weighted_sum(&terms);
    Ok((root, total_loss(l_cls, l_box, l_mask, l_kp, alpha)?))
}

/// Loss and parameter gradients of a batch without updating anything.
pub fn batch_gradients(model: &Model, batch: &[BatchItem], alpha: f64) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut g = Graph::new(&model.params);
    let (root, loss) = batch_loss(&mut g, model, batch, alpha)?;
    if !loss.is_finite() {
        return Err(Error::Diverged(loss));
    }
    let grads = g.backward(root).into_param_grads(&model.params);
    Ok((loss, grads))
}

/// One SGD update; returns the loss measured before the update.
pub fn train_step(model: &mut Model, opt: &mut Sgd, batch: &[BatchItem], alpha: f64, lr: f64) -> Result<LossBreakdown> {
    let (loss, grads) = batch_gradients(model, batch, alpha)?;
    opt.step(&mut model.params, &grads, lr);
    if !model.params.all_finite() {
        return Err(Error::Diverged(loss));
    }
    Ok(loss)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub learning_rate: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub clamped_points: usize,
}

/// Yields the scene indices and flip flags of each iteration: epochs of
/// seeded shuffles, cut into batches.
pub struct BatchSchedule {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    flip_prob: f64,
}

impl BatchSchedule {
    pub fn new(num_scenes: usize, batch: usize, flip_prob: f64, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..num_scenes).collect(),
            pos: num_scenes,
            batch,
            flip_prob,
        }
    }

    /// `(scene index, flip, proposal seed)` for each image of the next batch.
    pub fn next_batch(&mut self) -> Vec<(usize, bool, u64)> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let idx = self.order[self.pos];
            self.pos += 1;
            let flip = self.rng.gen_bool(self.flip_prob);
            out.push((idx, flip, self.rng.gen()));
        }
        out
    }
}

/// Trains `model` on `scenes` for `config.iterations` steps, calling `log`
/// after each step.
pub fn train(
    model: &mut Model,
    scenes: &[SceneRecord],
    config: &TrainConfig,
    mut log: impl FnMut(&IterationLog),
) -> Result<Vec<LossBreakdown>> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("no training scenes".into()));
    }
    let mut opt = Sgd::new(&model.params, config.momentum, config.weight_decay);
    let mut schedule = BatchSchedule::new(scenes.len(), config.batch_images, config.flip_prob, config.seed);
    let mut history = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let batch = schedule
            .next_batch()
            .into_iter()
            .map(|(i, flip, seed)| prepare_item(&scenes[i], flip, config, seed))
            .collect::<Result<Vec<_>>>()?;
        let lr = config.learning_rate_at(iteration);
        let loss = train_step(model, &mut opt, &batch, config.fusion.alpha, lr)?;
        log(&IterationLog {
            iteration,
            learning_rate: lr,
            loss,
            clamped_points: batch.iter().map(|b| b.targets.clamped).sum(),
        });
        history.push(loss);
    }
    Ok(history)
}

/// Fresh model for a training config.
pub fn build_model(config: &TrainConfig) -> Result<Model> {
    Model::new(&config.model, &config.fusion, config.seed)
}
