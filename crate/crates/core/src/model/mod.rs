//! The detector: a stride-4 convolutional backbone, RoI feature sampling,
//! box/mask/keypoint heads, and the keypoint→mask fusion variants.
//!
//! Forward passes are recorded on an [`autograd::Graph`]; the `*_forward`
//! methods on [`Model`] wrap single components for standalone use.

mod checkpoint;
mod config;
mod roi;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{config_digest, from_bytes, load_checkpoint, save_checkpoint, to_bytes, CHECKPOINT_MAGIC};
pub use config::{Design, FusionConfig, FusionMode, ModelConfig, Reduction};
pub use roi::roi_taps;

use crate::autograd::{self, BroadcastKind, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::tensor::Tensor;

/// Image pixels per backbone feature cell.
pub const FEATURE_STRIDE: usize = 4;
/// Side of the mask-head output grid.
pub const MASK_RESOLUTION: usize = 28;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Deconv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Layers {
    backbone: Vec<Conv>,
    box_fc: Vec<Dense>,
    cls: Dense,
    bbox: Dense,
    mask_convs: Vec<Conv>,
    mask_up: Deconv,
    mask_out: Conv,
    keypoint: Option<KeypointLayers>,
}

#[derive(Clone, Debug, PartialEq)]
struct KeypointLayers {
    convs: Vec<Conv>,
    ups: Vec<Deconv>,
    out: Conv,
    /// Design A/B strided reduction convolution.
    reduce: Option<Conv>,
    /// Design C mask-logit upsampling.
    mask_up: Option<Deconv>,
}

/// Outputs of all heads for one RoI.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub mask_logits: Var,
    pub keypoint_logits: Option<Var>,
    /// Mask logits after fusion; equal to `mask_logits` when fusion is off.
    pub fused_mask_logits: Var,
}

/// Per-RoI output tensors.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    pub class_logits: Vec<f64>,
    pub box_deltas: Vec<f64>,
    pub mask_logits: Tensor,
    pub keypoint_logits: Option<Tensor>,
    pub fused_mask_logits: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub fusion: FusionConfig,
    pub params: ParamStore,
    layers: Layers,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Rectified layers use a He-uniform bound, linear outputs a LeCun bound.
#[derive(Clone, Copy)]
enum Init {
    Relu,
    Linear,
}

struct Builder {
    store: ParamStore,
    seed: u64,
}

impl Builder {
    fn tensor(&mut self, name: &str, shape: &[usize], fan_in: usize, init: Init) -> ParamId {
        let bound = match init {
            Init::Relu => (6.0 / fan_in as f64).sqrt(),
            Init::Linear => (3.0 / fan_in as f64).sqrt(),
        };
        // Seeded per name so adding or removing a layer leaves the others intact.
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.store
            .add(name, Tensor::new(shape.to_vec(), data).expect("sized above"))
    }

    fn bias(&mut self, name: &str, n: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(&[n]))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, init: Init) -> Conv {
        Conv {
            w: self.tensor(&format!("{name}.weight"), &[cout, cin, k, k], cin * k * k, init),
            b: self.bias(&format!("{name}.bias"), cout),
            stride,
            pad: k / 2,
        }
    }

    fn deconv(&mut self, name: &str, cin: usize, cout: usize, init: Init) -> Deconv {
        Deconv {
            w: self.tensor(&format!("{name}.weight"), &[cin, cout, 2, 2], cin, init),
            b: self.bias(&format!("{name}.bias"), cout),
        }
    }

    fn dense(&mut self, name: &str, din: usize, dout: usize, init: Init) -> Dense {
        Dense {
            w: self.tensor(&format!("{name}.weight"), &[dout, din], din, init),
            b: self.bias(&format!("{name}.bias"), dout),
        }
    }
}

impl Model {
    /// Fresh model with seeded fan-in-scaled uniform weights and zero biases.
    pub fn new(config: &ModelConfig, fusion: &FusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        fusion.validate()?;
        let mut b = Builder {
            store: ParamStore::new(),
            seed,
        };
        let f = config.backbone_channels;
        let half = (f / 2).max(1);
        let backbone = vec![
            b.conv("backbone.0", 3, half, 3, 2, Init::Relu),
            b.conv("backbone.1", half, half, 3, 1, Init::Relu),
            b.conv("backbone.2", half, f, 3, 2, Init::Relu),
            b.conv("backbone.3", f, f, 3, 1, Init::Relu),
            b.conv("backbone.4", f, f, 3, 1, Init::Relu),
            b.conv("backbone.5", f, f, 3, 1, Init::Relu),
        ];
        let roi_dim = f * config.roi_size * config.roi_size;
        let c = config.num_classes;
        let box_fc = vec![
            b.dense("box_head.fc0", roi_dim, config.box_hidden, Init::Relu),
            b.dense("box_head.fc1", config.box_hidden, config.box_hidden, Init::Relu),
        ];
        let cls = b.dense("box_head.cls", config.box_hidden, c + 1, Init::Linear);
        let bbox = b.dense("box_head.bbox", config.box_hidden, 4 * c, Init::Linear);

        let mw = config.mask_channels;
        let mut mask_convs = Vec::new();
        for i in 0..4 {
            let cin = if i == 0 { f } else { mw };
            mask_convs.push(b.conv(&format!("mask_head.conv{i}"), cin, mw, 3, 1, Init::Relu));
        }
        let mask_up = b.deconv("mask_head.up", mw, mw, Init::Relu);
        let mask_out = b.conv("mask_head.out", mw, c, 1, 1, Init::Linear);

        let keypoint = if config.keypoint_head {
            let kw = config.keypoint_channels;
            let k1 = fusion.keypoint_channels();
            let mut convs = Vec::new();
            for i in 0..8 {
                let cin = if i == 0 { f } else { kw };
                convs.push(b.conv(&format!("keypoint_head.conv{i}"), cin, kw, 3, 1, Init::Relu));
            }
            let n_up = if fusion.design == Design::D { 1 } else { 2 };
            let ups = (0..n_up)
                .map(|i| b.deconv(&format!("keypoint_head.up{i}"), kw, kw, Init::Relu))
                .collect();
            let out = b.conv("keypoint_head.out", kw, k1, 1, 1, Init::Linear);
            let reduce = match (fusion.design, fusion.reduction) {
                (Design::A, Reduction::StridedConv) => Some(b.conv("fusion.reduce", 1, 1, 3, 2, Init::Linear)),
                (Design::B, Reduction::StridedConv) => Some(b.conv("fusion.reduce", k1, k1, 3, 2, Init::Linear)),
                _ => None,
            };
            let mask_up = (fusion.design == Design::C).then(|| b.deconv("fusion.mask_up", c, c, Init::Linear));
            Some(KeypointLayers {
                convs,
                ups,
                out,
                reduce,
                mask_up,
            })
        } else {
            None
        };

        Ok(Self {
            config: config.clone(),
            fusion: *fusion,
            params: b.store,
            layers: Layers {
                backbone,
                box_fc,
                cls,
                bbox,
                mask_convs,
                mask_up,
                mask_out,
                keypoint,
            },
        })
    }

    pub fn has_keypoint_head(&self) -> bool {
        self.layers.keypoint.is_some()
    }

    /// Whether fused logits differ from plain mask logits.
    pub fn fuses(&self) -> bool {
        self.fusion.enabled && self.layers.keypoint.is_some()
    }

    /// Side of the grid the mask loss is computed on.
    pub fn mask_target_resolution(&self) -> usize {
        if self.fuses() && self.fusion.design == Design::C {
            2 * MASK_RESOLUTION
        } else {
            MASK_RESOLUTION
        }
    }

    fn conv(&self, g: &mut Graph, x: Var, layer: &Conv, relu: bool) -> Result<Var> {
        let w = g.param(layer.w);
        let b = g.param(layer.b);
        let y = g.conv2d(x, w, b, layer.stride, layer.pad)?;
        Ok(if relu { g.relu(y) } else { y })
    }

    fn deconv(&self, g: &mut Graph, x: Var, layer: &Deconv, relu: bool) -> Result<Var> {
        let w = g.param(layer.w);
        let b = g.param(layer.b);
        let y = g.deconv2x2(x, w, b)?;
        Ok(if relu { g.relu(y) } else { y })
    }

    fn dense(&self, g: &mut Graph, x: Var, layer: &Dense, relu: bool) -> Result<Var> {
        let w = g.param(layer.w);
        let b = g.param(layer.b);
        let y = g.linear(x, w, b)?;
        Ok(if relu { g.relu(y) } else { y })
    }

    /// `image: [3, H, W]` → `[F, H/4, W/4]`.
    pub fn backbone(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let (c, h, w) = g.value(image).chw()?;
        if c != 3 || h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "backbone expects [3, H, W] with H, W divisible by {FEATURE_STRIDE}, got {:?}",
                g.value(image).shape()
            )));
        }
        let mut x = image;
        for layer in &self.layers.backbone {
            x = self.conv(g, x, layer, true)?;
        }
        Ok(x)
    }

    /// Samples an `S×S` grid of RoI features for an image-space box.
    pub fn roi_extract(&self, g: &mut Graph, features: Var, region: &Rect) -> Result<Var> {
        let (_, fh, fw) = g.value(features).chw()?;
        let s = self.config.roi_size;
        let taps = roi_taps(region, s, fh, fw, FEATURE_STRIDE as f64)?;
        g.sample(features, taps, s, s)
    }

    /// `rois: [R, F·S·S]` → `(class_logits [R, C+1], box_deltas [R, 4C])`.
    pub fn box_head(&self, g: &mut Graph, rois: Var) -> Result<(Var, Var)> {
        let mut x = rois;
        for layer in &self.layers.box_fc {
            x = self.dense(g, x, layer, true)?;
        }
        let cls = self.dense(g, x, &self.layers.cls, false)?;
        let bbox = self.dense(g, x, &self.layers.bbox, false)?;
        Ok((cls, bbox))
    }

    /// `roi: [F, S, S]` → `[C, 2S, 2S]` mask logits.
    pub fn mask_head(&self, g: &mut Graph, roi: Var) -> Result<Var> {
        let mut x = roi;
        for layer in &self.layers.mask_convs {
            x = self.conv(g, x, layer, true)?;
        }
        x = self.deconv(g, x, &self.layers.mask_up, true)?;
        self.conv(g, x, &self.layers.mask_out, false)
    }

    fn keypoint_layers(&self) -> Result<&KeypointLayers> {
        self.layers
            .keypoint
            .as_ref()
            .ok_or_else(|| Error::Config("model was built without a keypoint head".into()))
    }

    /// `roi: [F, S, S]` → `[k(+1), 4S, 4S]` (design D: `2S`) keypoint logits.
    pub fn keypoint_head(&self, g: &mut Graph, roi: Var) -> Result<Var> {
        let kp = self.keypoint_layers()?;
        let mut x = roi;
        for layer in &kp.convs {
            x = self.conv(g, x, layer, true)?;
        }
        for up in &kp.ups {
            x = self.deconv(g, x, up, true)?;
        }
        self.conv(g, x, &kp.out, false)
    }

    fn reduce(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.fusion.reduction {
            Reduction::Maxpool => g.maxpool2(x),
            Reduction::Avgpool => g.avgpool2(x),
            Reduction::StridedConv => {
                let layer = self
                    .keypoint_layers()?
                    .reduce
                    .ok_or_else(|| Error::Config("no reduction convolution".into()))?;
                // No rectifier after the reduction.
                self.conv(g, x, &layer, false)
            }
        }
    }

    /// The single-channel keypoint map `O_k` at the fusion resolution.
    pub fn keypoint_summary(&self, g: &mut Graph, keypoint_logits: Var) -> Result<Var> {
        match self.fusion.design {
            Design::A => {
                let s = g.channel_sum(keypoint_logits)?;
                self.reduce(g, s)
            }
            Design::B => {
                let r = self.reduce(g, keypoint_logits)?;
                g.channel_sum(r)
            }
            Design::C | Design::D => g.channel_sum(keypoint_logits),
        }
    }

    /// Fuses keypoint logits into mask logits according to the fusion config.
    pub fn fuse(&self, g: &mut Graph, keypoint_logits: Var, mask_logits: Var) -> Result<Var> {
        let ok = self.keypoint_summary(g, keypoint_logits)?;
        let fm = match self.fusion.design {
            Design::C => {
                let up = self
                    .keypoint_layers()?
                    .mask_up
                    .ok_or_else(|| Error::Config("no mask upsampling layer".into()))?;
                self.deconv(g, mask_logits, &up, false)?
            }
            _ => mask_logits,
        };
        let kind = match self.fusion.mode {
            FusionMode::Add => BroadcastKind::Add,
            FusionMode::Max => BroadcastKind::Max,
            FusionMode::Multiply => BroadcastKind::Mul,
        };
        g.broadcast(ok, fm, kind)
    }

    /// Mask and keypoint heads plus fusion for one RoI feature grid.
    /// `with_keypoints` forces the keypoint branch even when fusion is off
    /// (needed for its loss).
    pub fn roi_heads(&self, g: &mut Graph, roi: Var, with_keypoints: bool) -> Result<HeadVars> {
        let mask_logits = self.mask_head(g, roi)?;
        let keypoint_logits = if self.has_keypoint_head() && (with_keypoints || self.fuses()) {
            Some(self.keypoint_head(g, roi)?)
        } else {
            None
        };
        let fused_mask_logits = match keypoint_logits {
            Some(kp) if self.fuses() => self.fuse(g, kp, mask_logits)?,
            _ => mask_logits,
        };
        Ok(HeadVars {
            mask_logits,
            keypoint_logits,
            fused_mask_logits,
        })
    }

    /// Backbone on a `[3, H, W]` (or `[H, W, 3]`) image tensor.
    pub fn backbone_forward(&self, image: &Tensor) -> Result<Tensor> {
        let chw = to_chw(image)?;
        let mut g = Graph::new(&self.params);
        let x = g.input(chw);
        let y = self.backbone(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Standalone RoI sampling of a `[F, H, W]` feature map.
    pub fn roi_extract_forward(&self, features: &Tensor, region: &Rect) -> Result<Tensor> {
        roi_extract(features, region, self.config.roi_size, FEATURE_STRIDE as f64)
    }

    /// Every head on one RoI feature grid `[F, S, S]`.
    pub fn heads_forward(&self, roi: &Tensor) -> Result<HeadOutputs> {
        let mut g = Graph::new(&self.params);
        let x = g.input(roi.clone());
        let flat = g.reshape(x, &[1, roi.len()])?;
        let (cls, bbox) = self.box_head(&mut g, flat)?;
        let heads = self.roi_heads(&mut g, x, true)?;
        Ok(HeadOutputs {
            class_logits: g.value(cls).data().to_vec(),
            box_deltas: g.value(bbox).data().to_vec(),
            mask_logits: g.value(heads.mask_logits).clone(),
            keypoint_logits: heads.keypoint_logits.map(|v| g.value(v).clone()),
            fused_mask_logits: g.value(heads.fused_mask_logits).clone(),
        })
    }

    /// Standalone fusion of given keypoint and mask logits.
    pub fn fuse_forward(&self, keypoint_logits: &Tensor, mask_logits: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let k = g.input(keypoint_logits.clone());
        let m = g.input(mask_logits.clone());
        let y = self.fuse(&mut g, k, m)?;
        Ok(g.value(y).clone())
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.find(name)
    }
}

/// Bilinear RoI sampling of `features: [F, H, W]` with `stride` image pixels
/// per feature cell.
pub fn roi_extract(features: &Tensor, region: &Rect, out: usize, stride: f64) -> Result<Tensor> {
    let (c, fh, fw) = features.chw()?;
    let taps = roi_taps(region, out, fh, fw, stride)?;
    let plane = fh * fw;
    let mut data = Vec::with_capacity(c * out * out);
    for ch in 0..c {
        data.extend(taps.apply(&features.data()[ch * plane..(ch + 1) * plane], out * out));
    }
    Tensor::new(vec![c, out, out], data)
}

/// Accepts `[3, H, W]` as is and transposes `[H, W, 3]`.
pub fn to_chw(image: &Tensor) -> Result<Tensor> {
    match image.shape() {
        [3, _, _] => Ok(image.clone()),
        &[h, w, 3] => {
            let src = image.data();
            let mut out = vec![0.0; 3 * h * w];
            for (i, px) in src.chunks(3).enumerate() {
                for c in 0..3 {
                    out[c * h * w + i] = px[c];
                }
            }
            Tensor::new(vec![3, h, w], out)
        }
        other => Err(Error::Shape(format!("not an RGB image: {other:?}"))),
    }
}

/// Network input for an RGB image in `[0, 1]`: `[3, H, W]` layout, values
/// mapped to `[-1, 1]` so the first layer sees zero-centered data.
pub fn network_input(image: &Tensor) -> Result<Tensor> {
    let mut chw = to_chw(image)?;
    for v in chw.data_mut() {
        *v = 2.0 * *v - 1.0;
    }
    Ok(chw)
}

pub use autograd::Gradients;
