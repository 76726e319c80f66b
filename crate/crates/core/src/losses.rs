//! The four training losses and their weighted combination.
//!
//! Each `*_with_grad` function returns the loss together with its gradient
//! with respect to the logits, which is what the autograd graph records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-term losses of one step and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_box: f64,
    pub l_mask: f64,
    pub l_keypoint: f64,
    pub alpha: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_cls, self.l_box, self.l_mask, self.l_keypoint, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `L = L_cls + L_box + L_mask + α·L_keypoint`.
pub fn total_loss(l_cls: f64, l_box: f64, l_mask: f64, l_keypoint: f64, alpha: f64) -> Result<LossBreakdown> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be non-negative, got {alpha}")));
    }
    Ok(LossBreakdown {
        l_cls,
        l_box,
        l_mask,
        l_keypoint,
        alpha,
        total: l_cls + l_box + l_mask + alpha * l_keypoint,
    })
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax over `xs` written into `out`.
fn softmax_into(xs: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(xs);
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - lse).exp();
    }
}

/// Softmax cross-entropy of one logit vector against class `target`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::Target {
            target,
            max: logits.len().saturating_sub(1),
        });
    }
    let value = log_sum_exp(logits) - logits[target];
    let mut grad = vec![0.0; logits.len()];
    softmax_into(logits, &mut grad);
    grad[target] -= 1.0;
    Ok((value.max(0.0), grad))
}

/// Classification loss over `C + 1` logits; `target == C` is background.
pub fn loss_cls(class_logits: &[f64], target_class: usize) -> Result<f64> {
    softmax_cross_entropy(class_logits, target_class).map(|(v, _)| v)
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Smooth-L1 over the four `(tx, ty, tw, th)` deltas of the target class.
/// `box_deltas` holds `4·C` values; background (`None`) contributes zero.
pub fn loss_box_with_grad(
    box_deltas: &[f64],
    target_deltas: &[f64; 4],
    target_class: Option<usize>,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; box_deltas.len()];
    let Some(class) = target_class else {
        return Ok((0.0, grad));
    };
    let num_classes = box_deltas.len() / 4;
    if class >= num_classes {
        return Err(Error::Target {
            target: class,
            max: num_classes.saturating_sub(1),
        });
    }
    let mut value = 0.0;
    for i in 0..4 {
        let (v, g) = smooth_l1(box_deltas[4 * class + i] - target_deltas[i]);
        value += v;
        grad[4 * class + i] = g;
    }
    Ok((value, grad))
}

pub fn loss_box(box_deltas: &[f64], target_deltas: &[f64; 4], target_class: Option<usize>) -> Result<f64> {
    loss_box_with_grad(box_deltas, target_deltas, target_class).map(|(v, _)| v)
}

/// Mean binary cross-entropy between channel `class` of `mask_logits`
/// (`[C, N, N]`) and a binary `target` on the same `N×N` grid.
pub fn loss_mask_with_grad(mask_logits: &Tensor, target: &[bool], class: usize) -> Result<(f64, Tensor)> {
    let (c, h, w) = mask_logits.chw()?;
    if class >= c {
        return Err(Error::Target {
            target: class,
            max: c.saturating_sub(1),
        });
    }
    let n = h * w;
    if target.len() != n {
        return Err(Error::Shape(format!(
            "mask target has {} cells, prediction grid has {n}",
            target.len()
        )));
    }
    let logits = &mask_logits.data()[class * n..(class + 1) * n];
    let mut grad = Tensor::zeros(mask_logits.shape());
    let gd = &mut grad.data_mut()[class * n..(class + 1) * n];
    let mut value = 0.0;
    for i in 0..n {
        let x = logits[i];
        let t = if target[i] { 1.0 } else { 0.0 };
        value += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        let sig = if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        };
        gd[i] = (sig - t) / n as f64;
    }
    Ok((value / n as f64, grad))
}

pub fn loss_mask(mask_logits: &Tensor, target: &[bool], class: usize) -> Result<f64> {
    loss_mask_with_grad(mask_logits, target, class).map(|(v, _)| v)
}

/// Per channel, softmax cross-entropy over the `M²` positions against a
/// one-hot label, averaged over channels.
pub fn loss_keypoint_with_grad(logits: &Tensor, label: &Tensor) -> Result<(f64, Tensor)> {
    if logits.shape() != label.shape() {
        return Err(Error::Shape(format!(
            "keypoint logits {:?} vs label {:?}",
            logits.shape(),
            label.shape()
        )));
    }
    let (channels, h, w) = logits.chw()?;
    let n = h * w;
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for ch in 0..channels {
        let lab = &label.data()[ch * n..(ch + 1) * n];
        let hot = one_hot_index(lab).ok_or(Error::Label(ch))?;
        let plane = &logits.data()[ch * n..(ch + 1) * n];
        let (v, g) = softmax_cross_entropy(plane, hot)?;
        total += v;
        for (dst, src) in grad.data_mut()[ch * n..(ch + 1) * n].iter_mut().zip(g) {
            *dst = src / channels as f64;
        }
    }
    if channels == 0 {
        return Ok((0.0, grad));
    }
    Ok((total / channels as f64, grad))
}

pub fn loss_keypoint(logits: &Tensor, label: &Tensor) -> Result<f64> {
    loss_keypoint_with_grad(logits, label).map(|(v, _)| v)
}

fn one_hot_index(values: &[f64]) -> Option<usize> {
    let mut hot = None;
    for (i, &v) in values.iter().enumerate() {
        if v == 1.0 {
            if hot.is_some() {
                return None;
            }
            hot = Some(i);
        } else if v != 0.0 {
            return None;
        }
    }
    hot
}
