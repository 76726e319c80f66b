//! Dense row-major `f64` tensors and the raw kernels the autograd graph is
//! built on. Feature maps are laid out channel-major as `[C, H, W]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(channels, height, width)` of a rank-3 map.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!("expected a [C, H, W] map, got {:?}", self.shape))),
        }
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Slice `[start, end)` along the leading axis.
    pub fn rows(&self, start: usize, end: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        }
    }
}

/// `c = a · b + beta · c` for row-major matrices, with optional transposes.
/// `a` is `m×k` after transposition, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut().take(m * n) {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // Safety: extents checked above; strides describe dense row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel convolution over a `[C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut cols = vec![0.0; g.col_rows() * oh * ow];
    for c in 0..g.in_c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &x[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut x = vec![0.0; g.in_c * g.in_h * g.in_w];
    for c in 0..g.in_c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Convolution of `x: [Cin, H, W]` with `w: [Cout, Cin, K, K]` plus bias.
pub fn conv2d(x: &[f64], w: &[f64], b: &[f64], out_c: usize, g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    let mut y = vec![0.0; out_c * n];
    for (o, row) in y.chunks_mut(n).enumerate() {
        row.fill(b[o]);
    }
    if g.kernel == 1 && g.stride == 1 && g.pad == 0 {
        gemm(out_c, g.in_c, n, w, false, x, false, 1.0, &mut y);
    } else {
        let cols = im2col(x, g);
        gemm(out_c, g.col_rows(), n, w, false, &cols, false, 1.0, &mut y);
    }
    y
}

/// Gradients `(dx, dw, db)` of [`conv2d`] given the upstream gradient `dy`.
/// `dx` is only computed when `need_dx` is set.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    out_c: usize,
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let n = g.out_h() * g.out_w();
    let kk = g.col_rows();
    let db: Vec<f64> = dy.chunks(n).map(|r| r.iter().sum()).collect();
    let mut dw = vec![0.0; out_c * kk];
    let pointwise = g.kernel == 1 && g.stride == 1 && g.pad == 0;
    if pointwise {
        gemm(out_c, n, kk, dy, false, x, true, 0.0, &mut dw);
    } else {
        let cols = im2col(x, g);
        gemm(out_c, n, kk, dy, false, &cols, true, 0.0, &mut dw);
    }
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0; kk * n];
        gemm(kk, out_c, n, w, true, dy, false, 0.0, &mut dcols);
        if pointwise {
            dcols
        } else {
            col2im(&dcols, g)
        }
    });
    (dx, dw, db)
}

/// 2×2 stride-2 transposed convolution: `x: [Cin, H, W]`,
/// `w: [Cin, Cout, 2, 2]` → `[Cout, 2H, 2W]`.
pub fn deconv2x2(x: &[f64], w: &[f64], b: &[f64], in_c: usize, out_c: usize, h: usize, wd: usize) -> Vec<f64> {
    let n = h * wd;
    let rows = out_c * 4;
    let mut cols = vec![0.0; rows * n];
    gemm(rows, in_c, n, w, true, x, false, 0.0, &mut cols);
    let (oh, ow) = (2 * h, 2 * wd);
    let mut y = vec![0.0; out_c * oh * ow];
    for o in 0..out_c {
        for a in 0..2 {
            for bb in 0..2 {
                let src = &cols[(o * 4 + a * 2 + bb) * n..][..n];
                for i in 0..h {
                    let dst = &mut y[(o * oh + 2 * i + a) * ow..][..ow];
                    for j in 0..wd {
                        dst[2 * j + bb] = src[i * wd + j] + b[o];
                    }
                }
            }
        }
    }
    y
}

/// Gradients `(dx, dw, db)` of [`deconv2x2`].
pub fn deconv2x2_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    in_c: usize,
    out_c: usize,
    h: usize,
    wd: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = h * wd;
    let rows = out_c * 4;
    let (oh, ow) = (2 * h, 2 * wd);
    let mut dcols = vec![0.0; rows * n];
    let mut db = vec![0.0; out_c];
    for o in 0..out_c {
        db[o] = dy[o * oh * ow..(o + 1) * oh * ow].iter().sum();
        for a in 0..2 {
            for bb in 0..2 {
                let dst = &mut dcols[(o * 4 + a * 2 + bb) * n..][..n];
                for i in 0..h {
                    let src = &dy[(o * oh + 2 * i + a) * ow..][..ow];
                    for j in 0..wd {
                        dst[i * wd + j] = src[2 * j + bb];
                    }
                }
            }
        }
    }
    let mut dx = vec![0.0; in_c * n];
    gemm(in_c, rows, n, w, false, &dcols, false, 0.0, &mut dx);
    let mut dw = vec![0.0; in_c * rows];
    gemm(in_c, n, rows, x, false, &dcols, true, 0.0, &mut dw);
    (dx, dw, db)
}

/// 2×2 stride-2 max pooling; returns the pooled map and the flat argmax of
/// each window (first maximum in row-major window order).
pub fn maxpool2(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for a in 0..2 {
                    for b in 0..2 {
                        let idx = (ch * h + 2 * i + a) * w + 2 * j + b;
                        if best == usize::MAX || x[idx] > best_v {
                            best = idx;
                            best_v = x[idx];
                        }
                    }
                }
                y.push(best_v);
                arg.push(best);
            }
        }
    }
    (y, arg)
}

pub fn avgpool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let base = (ch * h + 2 * i) * w + 2 * j;
                y.push(0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]));
            }
        }
    }
    y
}
