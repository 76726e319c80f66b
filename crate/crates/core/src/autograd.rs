//! A small reverse-mode tape. Every forward op appends a node; `backward`
//! walks the tape in reverse and accumulates gradients for parameters and
//! for inputs created with [`Graph::input_with_grad`].

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeom, Tensor};

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Precomputed bilinear taps within one channel plane: for each output
/// position, up to four `(flat input position, weight)` pairs. The same taps
/// are applied to every channel.
#[derive(Clone, Debug, Default)]
pub struct Taps {
    pub offsets: Vec<usize>,
    pub index: Vec<usize>,
    pub weight: Vec<f64>,
}

impl Taps {
    pub fn apply(&self, input: &[f64], out_len: usize) -> Vec<f64> {
        (0..out_len)
            .map(|o| {
                (self.offsets[o]..self.offsets[o + 1])
                    .map(|t| input[self.index[t]] * self.weight[t])
                    .sum()
            })
            .collect()
    }

    pub fn scatter(&self, grad_out: &[f64], input_len: usize) -> Vec<f64> {
        let mut g = vec![0.0; input_len];
        for (o, &go) in grad_out.iter().enumerate() {
            for t in self.offsets[o]..self.offsets[o + 1] {
                g[self.index[t]] += go * self.weight[t];
            }
        }
        g
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        out_c: usize,
    },
    Deconv {
        x: Var,
        w: Var,
        b: Var,
        out_c: usize,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    AvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    ChannelSum(Var),
    Broadcast {
        ok: Var,
        fm: Var,
        kind: BroadcastKind,
    },
    Sample {
        x: Var,
        taps: Taps,
    },
    Stack(Vec<Var>),
    Reshape(Var),
    Loss {
        x: Var,
        grad: Tensor,
    },
    WeightedSum(Vec<(Var, f64)>),
}

/// How a single-channel map is combined with every channel of another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BroadcastKind {
    Add,
    Mul,
    Max,
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient is tracked through it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is reported by [`Gradients::input`].
    pub fn input_with_grad(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (in_c, in_h, in_w) = self.value(x).chw()?;
        let ws = self.value(w).shape().to_vec();
        let (out_c, kernel) = match ws[..] {
            [o, c, kh, kw] if c == in_c && kh == kw => (o, kh),
            _ => {
                return Err(Error::Shape(format!(
                    "conv weight {ws:?} does not fit input with {in_c} channels"
                )))
            }
        };
        if in_h + 2 * pad < kernel || in_w + 2 * pad < kernel {
            return Err(Error::Shape(format!(
                "input {in_h}x{in_w} smaller than kernel {kernel}"
            )));
        }
        let geom = ConvGeom {
            in_c,
            in_h,
            in_w,
            kernel,
            stride,
            pad,
        };
        let y = tensor::conv2d(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            out_c,
            &geom,
        );
        let shape = [out_c, geom.out_h(), geom.out_w()];
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor::new(shape.to_vec(), y)?,
            Op::Conv { x, w, b, geom, out_c },
            needs,
        ))
    }

    /// 2×2 stride-2 transposed convolution, `w: [Cin, Cout, 2, 2]`.
    pub fn deconv2x2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (in_c, h, wd) = self.value(x).chw()?;
        let ws = self.value(w).shape().to_vec();
        let out_c = match ws[..] {
            [c, o, 2, 2] if c == in_c => o,
            _ => {
                return Err(Error::Shape(format!(
                    "deconv weight {ws:?} does not fit input with {in_c} channels"
                )))
            }
        };
        let y = tensor::deconv2x2(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            in_c,
            out_c,
            h,
            wd,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![out_c, 2 * h, 2 * wd], y)?,
            Op::Deconv { x, w, b, out_c },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(y, Op::Relu(x), needs)
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        even_dims(h, w)?;
        let (y, arg) = tensor::maxpool2(self.value(x).data(), c, h, w);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![c, h / 2, w / 2], y)?, Op::MaxPool { x, arg }, needs))
    }

    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        even_dims(h, w)?;
        let y = tensor::avgpool2(self.value(x).data(), c, h, w);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![c, h / 2, w / 2], y)?, Op::AvgPool(x), needs))
    }

    /// `x: [R, D]`, `w: [Out, D]`, `b: [Out]` → `[R, Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (r, d, out) = match (&xs[..], &ws[..]) {
            ([r, d], [o, d2]) if d == d2 => (*r, *d, *o),
            _ => return Err(Error::Shape(format!("linear {xs:?} x {ws:?}"))),
        };
        let mut y = vec![0.0; r * out];
        let bias = self.value(b).data();
        for row in y.chunks_mut(out) {
            row.copy_from_slice(bias);
        }
        tensor::gemm(
            r,
            d,
            out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            1.0,
            &mut y,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::new(vec![r, out], y)?, Op::Linear { x, w, b }, needs))
    }

    /// Sums a `[C, H, W]` map over channels into `[1, H, W]`.
    pub fn channel_sum(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let n = h * w;
        let src = self.value(x).data();
        let mut y = vec![0.0; n];
        for ch in 0..c {
            for (a, b) in y.iter_mut().zip(&src[ch * n..(ch + 1) * n]) {
                *a += b;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![1, h, w], y)?, Op::ChannelSum(x), needs))
    }

    /// Combines `ok: [1, H, W]` with every channel of `fm: [C, H, W]`.
    pub fn broadcast(&mut self, ok: Var, fm: Var, kind: BroadcastKind) -> Result<Var> {
        let (one, h, w) = self.value(ok).chw()?;
        let (c, fh, fw) = self.value(fm).chw()?;
        if one != 1 || (h, w) != (fh, fw) {
            return Err(Error::Shape(format!(
                "cannot broadcast {:?} over {:?}",
                self.value(ok).shape(),
                self.value(fm).shape()
            )));
        }
        let n = h * w;
        let o = self.value(ok).data();
        let f = self.value(fm).data();
        let mut y = Vec::with_capacity(c * n);
        for ch in 0..c {
            for i in 0..n {
                let (a, b) = (o[i], f[ch * n + i]);
                y.push(match kind {
                    BroadcastKind::Add => a + b,
                    BroadcastKind::Mul => a * b,
                    BroadcastKind::Max => a.max(b),
                });
            }
        }
        let needs = self.needs(ok) || self.needs(fm);
        Ok(self.push(Tensor::new(vec![c, h, w], y)?, Op::Broadcast { ok, fm, kind }, needs))
    }

    /// Resamples every channel of `x: [C, H, W]` through plane taps into
    /// `[C, out_h, out_w]`.
    pub fn sample(&mut self, x: Var, taps: Taps, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let n = out_h * out_w;
        if taps.offsets.len() != n + 1 || taps.index.iter().any(|&i| i >= h * w) {
            return Err(Error::Shape("tap table does not match the sampled map".into()));
        }
        let src = self.value(x).data();
        let mut y = Vec::with_capacity(c * n);
        for ch in 0..c {
            y.extend(taps.apply(&src[ch * h * w..(ch + 1) * h * w], n));
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![c, out_h, out_w], y)?, Op::Sample { x, taps }, needs))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Shape("stack of zero tensors".into()))?;
        let inner = self.value(*first).shape().to_vec();
        let mut data = Vec::with_capacity(xs.len() * inner.iter().product::<usize>());
        for &v in xs {
            if self.value(v).shape() != inner.as_slice() {
                return Err(Error::Shape("stack of mismatched shapes".into()));
            }
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![xs.len()];
        shape.extend(inner);
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::new(shape, data)?, Op::Stack(xs.to_vec()), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(y, Op::Reshape(x), needs))
    }

    /// Records a scalar loss whose gradient with respect to `x` was
    /// computed alongside its value.
    pub fn loss(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.value(x).shape() {
            return Err(Error::Shape("loss gradient shape mismatch".into()));
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(value), Op::Loss { x, grad }, needs))
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes. Terms with zero weight are skipped.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let terms: Vec<(Var, f64)> = terms.iter().copied().filter(|&(_, w)| w != 0.0).collect();
        let mut total = 0.0;
        for &(v, w) in &terms {
            total += w * self.value(v).item();
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(Tensor::scalar(total), Op::WeightedSum(terms), needs)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params: Vec<Option<Tensor>> = vec![None; self.params.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                match &mut params[id.0] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        Gradients { nodes: grads, params }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut send = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv { x, w, b, geom, out_c } => {
                let (dx, dw, db) = tensor::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    *out_c,
                    geom,
                    self.needs(*x),
                );
                if let Some(dx) = dx {
                    send(*x, shaped(self.value(*x), dx));
                }
                send(*w, shaped(self.value(*w), dw));
                send(*b, shaped(self.value(*b), db));
            }
            Op::Deconv { x, w, b, out_c } => {
                let (in_c, h, wd) = self.value(*x).chw().expect("checked in forward");
                let (dx, dw, db) =
                    tensor::deconv2x2_backward(self.value(*x).data(), self.value(*w).data(), gd, in_c, *out_c, h, wd);
                send(*x, shaped(self.value(*x), dx));
                send(*w, shaped(self.value(*w), dw));
                send(*b, shaped(self.value(*b), db));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                send(*x, shaped(self.value(*x), dx));
            }
            Op::MaxPool { x, arg } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&a, &d) in arg.iter().zip(gd) {
                    dx[a] += d;
                }
                send(*x, shaped(self.value(*x), dx));
            }
            Op::AvgPool(x) => {
                let (c, h, w) = self.value(*x).chw().expect("checked in forward");
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let d = 0.25 * gd[(ch * oh + i) * ow + j];
                            let base = (ch * h + 2 * i) * w + 2 * j;
                            dx[base] += d;
                            dx[base + 1] += d;
                            dx[base + w] += d;
                            dx[base + w + 1] += d;
                        }
                    }
                }
                send(*x, shaped(self.value(*x), dx));
            }
            Op::Linear { x, w, b } => {
                let (r, d) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let out = self.value(*w).shape()[0];
                if self.needs(*x) {
                    let mut dx = vec![0.0; r * d];
                    tensor::gemm(r, out, d, gd, false, self.value(*w).data(), false, 0.0, &mut dx);
                    send(*x, shaped(self.value(*x), dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; out * d];
                    tensor::gemm(out, r, d, gd, true, self.value(*x).data(), false, 0.0, &mut dw);
                    send(*w, shaped(self.value(*w), dw));
                }
                let mut db = vec![0.0; out];
                for row in gd.chunks(out) {
                    for (a, v) in db.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                send(*b, shaped(self.value(*b), db));
            }
            Op::ChannelSum(x) => {
                let c = self.value(*x).shape()[0];
                let dx = gd.repeat(c);
                send(*x, shaped(self.value(*x), dx));
            }
            Op::Broadcast { ok, fm, kind } => {
                let o = self.value(*ok).data();
                let f = self.value(*fm).data();
                let n = o.len();
                let c = f.len() / n;
                let mut dok = vec![0.0; n];
                let mut dfm = vec![0.0; f.len()];
                for ch in 0..c {
                    for p in 0..n {
                        let idx = ch * n + p;
                        let d = gd[idx];
                        let (to_ok, to_fm) = match kind {
                            BroadcastKind::Add => (d, d),
                            BroadcastKind::Mul => (d * f[idx], d * o[p]),
                            // Ties route the gradient to the keypoint map.
                            BroadcastKind::Max => {
                                if o[p] >= f[idx] {
                                    (d, 0.0)
                                } else {
                                    (0.0, d)
                                }
                            }
                        };
                        dok[p] += to_ok;
                        dfm[idx] = to_fm;
                    }
                }
                send(*ok, shaped(self.value(*ok), dok));
                send(*fm, shaped(self.value(*fm), dfm));
            }
            Op::Sample { x, taps } => {
                let (c, h, w) = self.value(*x).chw().expect("checked in forward");
                let n = taps.offsets.len() - 1;
                let mut dx = Vec::with_capacity(c * h * w);
                for ch in 0..c {
                    dx.extend(taps.scatter(&gd[ch * n..(ch + 1) * n], h * w));
                }
                send(*x, shaped(self.value(*x), dx));
            }
            Op::Stack(xs) => {
                let inner = gd.len() / xs.len();
                for (k, &v) in xs.iter().enumerate() {
                    let part = gd[k * inner..(k + 1) * inner].to_vec();
                    send(v, shaped(self.value(v), part));
                }
            }
            Op::Reshape(x) => {
                send(*x, shaped(self.value(*x), gd.to_vec()));
            }
            Op::Loss { x, grad } => {
                send(*x, grad.scale(gd[0]));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    send(v, Tensor::scalar(w * gd[0]));
                }
            }
        }
    }
}

fn shaped(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("gradient matches its value's shape")
}

fn even_dims(h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) || h == 0 || w == 0 {
        return Err(Error::Shape(format!("2x2 pooling needs even extents, got {h}x{w}")));
    }
    Ok(())
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a parameter, `None` if the loss does not depend on it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].as_ref()
    }

    /// Gradient for an input registered with [`Graph::input_with_grad`].
    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    /// Dense gradients aligned with the parameter store, zero where absent.
    pub fn into_param_grads(self, store: &ParamStore) -> Vec<Tensor> {
        self.params
            .into_iter()
            .zip(store.ids())
            .map(|(g, id)| g.unwrap_or_else(|| Tensor::zeros(store.get(id).shape())))
            .collect()
    }
}
