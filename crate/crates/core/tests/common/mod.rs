#![allow(dead_code)]

use maskpoint::autograd::{Graph, Var};
use maskpoint::contour::{make_labels, BinaryMask, ClosedContour, LabelConfig};
use maskpoint::synth::{generate_dataset, rasterize_shape, GeneratorConfig, ShapeKind, ShapeSpec};
use maskpoint::{Design, FusionConfig, FusionMode, Model, ModelConfig, Reduction, Result, SceneRecord, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Narrow model that keeps finite-difference checks fast.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_classes: 3,
        backbone_channels: 4,
        roi_size: 14,
        box_hidden: 8,
        mask_channels: 3,
        keypoint_channels: 3,
        keypoint_head: true,
        design_c_report_28: false,
    }
}

pub fn tiny_fusion() -> FusionConfig {
    FusionConfig {
        k: 3,
        ..FusionConfig::default()
    }
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Scenes with contour labels of `k` points (plus centers).
pub fn labeled_scenes(config: &GeneratorConfig, first_id: u64, count: usize, seed: u64, k: usize) -> Vec<SceneRecord> {
    let mut scenes = generate_dataset(config, first_id, count, seed).unwrap();
    let labels = LabelConfig {
        k,
        ..LabelConfig::default()
    };
    for s in &mut scenes {
        for inst in &mut s.instances {
            inst.contour_points = Some(make_labels(&inst.mask, &labels).unwrap());
        }
    }
    scenes
}

/// `|a − n| / max(|a|, |n|)`, with pairs below `1e-8` in both treated as
/// agreeing when their difference is under `1e-10`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < 1e-8 {
        if diff < 1e-10 {
            0.0
        } else {
            diff / 1e-8
        }
    } else {
        diff / scale
    }
}

pub struct GradReport {
    pub max_rel: f64,
    pub checked: usize,
    /// Entries whose `±h` interval straddles a ReLU or max kink.
    pub kinked: usize,
    pub worst: String,
}

/// Central difference at `x` from a probe `f(x + d)`. Returns `None` when
/// the estimates at `h` and `h/2` disagree: on a smooth function they match
/// to `O(h²)`, so disagreement means a ReLU or max kink lies inside
/// `[x − h, x + h]` and the difference says nothing about the derivative at
/// `x`. A wrong analytic gradient does not make the two estimates disagree,
/// so skipping these never hides a backward bug.
pub fn central_difference(h: f64, mut f: impl FnMut(f64) -> f64) -> Option<f64> {
    let plus = f(h);
    let full = (plus - f(-h)) / (2.0 * h);
    let half = (f(h / 2.0) - f(-h / 2.0)) / h;
    // Rounding in the function values alone moves either estimate by about
    // `ε·|f|/h`.
    let noise = 16.0 * f64::EPSILON * plus.abs() / h;
    ((full - half).abs() <= (1e-6 * full.abs()).max(1e-9).max(noise)).then_some(full)
}

/// Checks `d(Σ wᵢ·yᵢ)/dθ` for `y = f(model, input)` against central
/// differences with step `h`, for up to `per_tensor` entries of every
/// parameter and of the input. `w` is a fixed random projection.
pub fn check_gradients(
    model: &Model,
    input: &Tensor,
    h: f64,
    per_tensor: usize,
    seed: u64,
    f: impl Fn(&Model, &mut Graph, Var) -> Result<Var>,
) -> GradReport {
    let forward = |m: &Model, x: &Tensor, w: Option<&Tensor>| -> (f64, Tensor) {
        let mut g = Graph::new(&m.params);
        let xv = g.input(x.clone());
        let y = f(m, &mut g, xv).unwrap();
        let out = g.value(y).clone();
        let s = w.map_or(0.0, |w| w.data().iter().zip(out.data()).map(|(a, b)| a * b).sum());
        (s, out)
    };
    let (_, y0) = forward(model, input, None);
    let w = random_tensor(y0.shape(), seed ^ 0x5eed);
    let value = |m: &Model, x: &Tensor| forward(m, x, Some(&w)).0;

    let mut g = Graph::new(&model.params);
    let xv = g.input_with_grad(input.clone());
    let y = f(model, &mut g, xv).unwrap();
    let s = value(model, input);
    let root = g.loss(y, s, w.clone()).unwrap();
    let grads = g.backward(root);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport {
        max_rel: 0.0,
        checked: 0,
        kinked: 0,
        worst: String::new(),
    };
    let mut record = |name: &str, i: usize, a: f64, numeric: Option<f64>| {
        let Some(n) = numeric else {
            report.kinked += 1;
            return;
        };
        let rel = relative_error(a, n);
        report.checked += 1;
        if rel > report.max_rel {
            report.max_rel = rel;
            report.worst = format!("{name}[{i}]: analytic {a:e}, numeric {n:e}");
        }
    };

    for id in model.params.ids() {
        let name = model.params.name(id).to_string();
        let len = model.params.get(id).len();
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(model.params.get(id).shape()));
        for _ in 0..per_tensor.min(len) {
            let i = rng.gen_range(0..len);
            let numeric = central_difference(h, |d| {
                let mut m = model.clone();
                m.params.get_mut(id).data_mut()[i] += d;
                value(&m, input)
            });
            record(&name, i, analytic.data()[i], numeric);
        }
    }
    let analytic = grads.input(xv).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
    for _ in 0..per_tensor.min(input.len()) {
        let i = rng.gen_range(0..input.len());
        let numeric = central_difference(h, |d| {
            let mut x = input.clone();
            x.data_mut()[i] += d;
            value(model, &x)
        });
        record("input", i, analytic.data()[i], numeric);
    }
    report
}

/// A random shape fully inside a `size × size` grid; convex kinds only when
/// `convex` is set.
pub fn random_shape_mask(rng: &mut ChaCha8Rng, size: usize, convex: bool) -> BinaryMask {
    loop {
        let kinds: &[ShapeKind] = if convex { &ShapeKind::ALL[..3] } else { &ShapeKind::ALL };
        let spec = ShapeSpec {
            kind: kinds[rng.gen_range(0..kinds.len())],
            center: (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64)),
            scale: rng.gen_range(3.0..size as f64 / 3.0),
            aspect: rng.gen_range(0.5..2.0),
            rotation: rng.gen_range(0.0..std::f64::consts::TAU),
            class_id: 0,
        };
        if let Ok(mask) = rasterize_shape(&spec, size, size) {
            if mask.count() >= 3 {
                return mask;
            }
        }
    }
}

/// Independent arc-length oracle: resample the closed polyline densely at
/// `1000·k` equal steps (each located by binary search over cumulative
/// lengths), then pick for every `i` the dense sample whose arc length is
/// nearest `i·P/k`. Returns `(arc length, position)` per point.
pub fn dense_arc_oracle(contour: &ClosedContour, k: usize) -> Vec<(f64, (f64, f64))> {
    let pts: Vec<(f64, f64)> = contour.points.iter().map(|&(r, c)| (r as f64, c as f64)).collect();
    let n = pts.len();
    let mut cum = vec![0.0];
    for i in 0..n {
        let (a, b) = (pts[i], pts[(i + 1) % n]);
        cum.push(cum[i] + (b.0 - a.0).hypot(b.1 - a.1));
    }
    let perimeter = cum[n];
    let steps = 1000 * k;
    let dense = |j: usize| -> (f64, (f64, f64)) {
        let s = j as f64 * perimeter / steps as f64;
        if perimeter == 0.0 {
            return (0.0, pts[0]);
        }
        let seg = cum.partition_point(|&c| c <= s).saturating_sub(1).min(n - 1);
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { (s - cum[seg]) / len } else { 0.0 };
        let (a, b) = (pts[seg], pts[(seg + 1) % n]);
        (s, (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)))
    };
    (0..k)
        .map(|i| {
            let target = i as f64 * perimeter / k as f64;
            let guess = 1000 * i;
            (guess.saturating_sub(1)..=(guess + 1).min(steps - 1))
                .map(dense)
                .min_by(|a, b| (a.0 - target).abs().total_cmp(&(b.0 - target).abs()))
                .unwrap()
        })
        .collect()
}

/// Distance from `p` to the closed polyline through the contour pixels.
pub fn polyline_distance(contour: &ClosedContour, p: (f64, f64)) -> f64 {
    let pts: Vec<(f64, f64)> = contour.points.iter().map(|&(r, c)| (r as f64, c as f64)).collect();
    let n = pts.len();
    (0..n)
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % n]);
            let (dr, dc) = (b.0 - a.0, b.1 - a.1);
            let len2 = dr * dr + dc * dc;
            let t = if len2 == 0.0 {
                0.0
            } else {
                (((p.0 - a.0) * dr + (p.1 - a.1) * dc) / len2).clamp(0.0, 1.0)
            };
            (p.0 - a.0 - t * dr).hypot(p.1 - a.1 - t * dc)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Compares `grads` (one tensor per parameter, in store order) with central
/// differences of the scalar `value(model)` on up to `per_tensor` entries
/// of every parameter.
///
/// `floor` bounds the denominator of the relative error from below. Central
/// differences cannot resolve derivatives under about `ε·|value|/h`, so
/// `floor` should sit well above that.
pub fn check_param_gradients(
    model: &Model,
    grads: &[Tensor],
    h: f64,
    floor: f64,
    per_tensor: usize,
    seed: u64,
    value: impl Fn(&Model) -> f64,
) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport {
        max_rel: 0.0,
        checked: 0,
        kinked: 0,
        worst: String::new(),
    };
    for (id, analytic) in model.params.ids().zip(grads) {
        for _ in 0..per_tensor.min(analytic.len()) {
            let i = rng.gen_range(0..analytic.len());
            let numeric = central_difference(h, |d| {
                let mut m = model.clone();
                m.params.get_mut(id).data_mut()[i] += d;
                value(&m)
            });
            let Some(n) = numeric else {
                report.kinked += 1;
                continue;
            };
            let a = analytic.data()[i];
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = format!("{}[{i}]: analytic {a:e}, numeric {n:e}", model.params.name(id));
            }
        }
    }
    report
}

/// Shifts every bias off zero so no unit starts exactly on a ReLU kink.
pub fn perturb_biases(model: &mut Model, seed: u64) {
    let ids: Vec<_> = model
        .params
        .ids()
        .filter(|&id| model.params.name(id).ends_with(".bias"))
        .collect();
    for (n, id) in ids.into_iter().enumerate() {
        let noise = random_tensor(model.params.get(id).shape(), seed + n as u64).scale(0.1);
        model.params.get_mut(id).add_assign(&noise);
    }
}

/// Fresh biases are exactly zero, which parks dead units on the ReLU kink
/// where central differences are meaningless; shift them off it.
/// Gradients do not depend on the RoI side; a small one keeps the ReLU count
/// (and so the chance of a kink inside `±h`) down.
pub fn gradient_model(fusion: FusionConfig) -> Model {
    let config = ModelConfig {
        roi_size: 6,
        ..tiny_config()
    };
    let mut m = Model::new(&config, &fusion, 11).unwrap();
    perturb_biases(&mut m, 900);
    m
}

pub fn roi_input(config: &ModelConfig, seed: u64) -> Tensor {
    random_tensor(&[config.backbone_channels, config.roi_size, config.roi_size], seed)
}

/// Design, reduction and mode of every fusion variant in the gradient suite.
pub fn fusion_variants() -> Vec<(Design, Reduction, FusionMode)> {
    let mut v = Vec::new();
    for reduction in [Reduction::Maxpool, Reduction::Avgpool, Reduction::StridedConv] {
        for mode in [FusionMode::Add, FusionMode::Max, FusionMode::Multiply] {
            v.push((Design::B, reduction, mode));
        }
    }
    for mode in [FusionMode::Add, FusionMode::Max, FusionMode::Multiply] {
        v.push((Design::A, Reduction::StridedConv, mode));
        v.push((Design::C, Reduction::Maxpool, mode));
        v.push((Design::D, Reduction::Maxpool, mode));
    }
    v.push((Design::A, Reduction::Avgpool, FusionMode::Multiply));
    v.push((Design::A, Reduction::Maxpool, FusionMode::Add));
    v
}

/// Gradient checks of the box, mask and keypoint heads.
pub fn head_gradient_reports(h: f64) -> Vec<(String, GradReport)> {
    let mut out = Vec::new();
    let m = gradient_model(tiny_fusion());
    let x = roi_input(&m.config, 21);
    for (label, pick) in [("box head class logits", 0u64), ("box head deltas", 1)] {
        let report = check_gradients(&m, &x, h, 6, 1 + pick, |m, g, x| {
            let flat = g.reshape(x, &[1, g.value(x).len()])?;
            let (cls, bbox) = m.box_head(g, flat)?;
            Ok(if pick == 0 { cls } else { bbox })
        });
        out.push((label.to_string(), report));
    }
    let x = roi_input(&m.config, 22);
    out.push((
        "mask head".into(),
        check_gradients(&m, &x, h, 6, 3, |m, g, x| m.mask_head(g, x)),
    ));
    for design in [Design::B, Design::D] {
        let m = gradient_model(FusionConfig {
            design,
            ..tiny_fusion()
        });
        let x = roi_input(&m.config, 23);
        out.push((
            format!("keypoint head {design:?}"),
            check_gradients(&m, &x, h, 6, 4, |m, g, x| m.keypoint_head(g, x)),
        ));
    }
    out
}

/// Gradient checks of the fused mask logits for every fusion variant.
pub fn fusion_gradient_reports(h: f64) -> Vec<(String, GradReport)> {
    fusion_variants()
        .into_iter()
        .enumerate()
        .map(|(i, (design, reduction, mode))| {
            let m = gradient_model(FusionConfig {
                design,
                reduction,
                mode,
                ..tiny_fusion()
            });
            let x = roi_input(&m.config, 30 + i as u64);
            let report = check_gradients(&m, &x, h, 4, 40 + i as u64, |m, g, x| {
                Ok(m.roi_heads(g, x, false)?.fused_mask_logits)
            });
            (format!("fusion {design:?} {reduction:?} {mode:?}"), report)
        })
        .collect()
}

/// Kinks are rare away from zero-initialised units; many of them would
/// mean the check is not looking at much.
pub fn gradients_pass(report: &GradReport, tol: f64) -> bool {
    report.kinked * 10 <= report.checked && report.max_rel < tol
}
