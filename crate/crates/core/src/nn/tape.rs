//! Reverse-mode autodiff over dense tensors.
//!
//! Every primitive appends one node holding its forward value and whatever it
//! needs for the backward pass. Nodes are created in topological order, so a
//! single reverse sweep visits each node once after all of its consumers.

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::suppress::RoiSampler;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Upsample2x {
        input: Var,
        rows: Vec<Lerp>,
        cols: Vec<Lerp>,
    },
    Add(Var, Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Reshape(Var),
    Crop {
        input: Var,
        height: usize,
        width: usize,
    },
    RoiAlign {
        input: Var,
        samplers: Vec<RoiSampler>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Two-tap linear interpolation weights along one axis.
#[derive(Debug, Clone, Copy)]
struct Lerp {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

/// Half-pixel-centered bilinear taps for doubling an axis of length `len`.
fn upsample_taps(len: usize) -> Vec<Lerp> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let w1 = src - i0 as f64;
            Lerp {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a constant or trainable input. Any gradient buffer on `value`
    /// is dropped; gradients come back through [`Gradients`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let value = Tensor::new(value.shape().to_vec(), value.into_data())
            .expect("tensor shape already validated");
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// 2-D convolution of `[N, C, H, W]` with `[O, C, k, k]` weights and `[O]`
    /// bias, zero padding `k / 2`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![xs.first().copied().unwrap_or(0), ws.get(1).copied().unwrap_or(0), 0, 0],
                got: xs,
            });
        }
        self.value(bias).check_shape(&[ws[0]])?;
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let pad = k / 2;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::InvalidArgument(format!("conv input {h}x{w} smaller than kernel {k}")));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let ckk = c * k * k;
        let plane = ho * wo;
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let b = self.value(bias).data();

        let mut out = vec![0.0; n * o * plane];
        let mut col = vec![0.0; ckk * plane];
        for ni in 0..n {
            let xn = &x[ni * c * h * w..(ni + 1) * c * h * w];
            im2col(xn, c, h, w, k, stride, pad, ho, wo, &mut col);
            let yn = &mut out[ni * o * plane..(ni + 1) * o * plane];
            for (oi, row) in yn.chunks_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v = b[oi]);
            }
            gemm(o, ckk, plane, 1.0, wt, false, &col, false, 1.0, yn);
        }
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        let value = Tensor::new(vec![n, o, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(input);
        self.push(value, Op::Relu(input), needs)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(input);
        self.push(value, Op::Sigmoid(input), needs)
    }

    /// Bilinear ×2 upsampling of `[N, C, H, W]` (half-pixel centers, edge clamp).
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        if xs.len() != 4 || xs[2] == 0 || xs[3] == 0 {
            return Err(Error::InvalidArgument(format!("upsample2x needs [N,C,H,W], got {xs:?}")));
        }
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let rows = upsample_taps(h);
        let cols = upsample_taps(w);
        let x = self.value(input).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; nc * h2 * w2];
        for p in 0..nc {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for (oy, ry) in rows.iter().enumerate() {
                let r0 = &src[ry.i0 * w..(ry.i0 + 1) * w];
                let r1 = &src[ry.i1 * w..(ry.i1 + 1) * w];
                let drow = &mut dst[oy * w2..(oy + 1) * w2];
                for (ox, rx) in cols.iter().enumerate() {
                    let top = rx.w0 * r0[rx.i0] + rx.w1 * r0[rx.i1];
                    let bot = rx.w0 * r1[rx.i0] + rx.w1 * r1[rx.i1];
                    drow[ox] = ry.w0 * top + ry.w1 * bot;
                }
            }
        }
        let value = Tensor::new(vec![xs[0], xs[1], h2, w2], out)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::Upsample2x { input, rows, cols }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        vb.check_shape(va.shape())?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// `[N, D] x [O, D]^T + [O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                expected: vec![xs.first().copied().unwrap_or(0), ws.get(1).copied().unwrap_or(0)],
                got: xs,
            });
        }
        self.value(bias).check_shape(&[ws[0]])?;
        let (n, d, o) = (xs[0], xs[1], ws[0]);
        let b = self.value(bias).data();
        let mut out: Vec<f64> = (0..n).flat_map(|_| b.iter().copied()).collect();
        gemm(n, d, o, 1.0, self.value(input).data(), false, self.value(weight).data(), true, 1.0, &mut out);
        let value = Tensor::new(vec![n, o], out)?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(value, Op::Linear { input, weight, bias }, needs))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::Reshape(input), needs))
    }

    /// Top-left `height x width` window of `[N, C, H, W]`.
    pub fn crop(&mut self, input: Var, height: usize, width: usize) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        if xs.len() != 4 || height == 0 || width == 0 || height > xs[2] || width > xs[3] {
            return Err(Error::InvalidArgument(format!("cannot crop {xs:?} to {height}x{width}")));
        }
        let (nc, w) = (xs[0] * xs[1], xs[3]);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(nc * height * width);
        for p in 0..nc {
            for r in 0..height {
                let start = (p * xs[2] + r) * w;
                out.extend_from_slice(&x[start..start + width]);
            }
        }
        let value = Tensor::new(vec![xs[0], xs[1], height, width], out)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::Crop { input, height, width }, needs))
    }

    /// ROI Align of a `[C, H, W]` feature map; output `[R, C, ph, pw]`.
    pub fn roi_align(&mut self, input: Var, samplers: Vec<RoiSampler>) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::InvalidArgument(format!("roi_align needs [C,H,W], got {xs:?}")));
        }
        let (c, plane) = (xs[0], xs[1] * xs[2]);
        let (ph, pw) = samplers.first().map(|s| s.output_size()).unwrap_or((1, 1));
        let bins = ph * pw;
        let x = self.value(input).data();
        let mut out = vec![0.0; samplers.len() * c * bins];
        for (r, s) in samplers.iter().enumerate() {
            if s.plane_len() != plane || s.output_size() != (ph, pw) {
                return Err(Error::InvalidArgument("roi sampler built for another feature map".into()));
            }
            for ci in 0..c {
                let dst = &mut out[(r * c + ci) * bins..(r * c + ci + 1) * bins];
                s.gather(&x[ci * plane..(ci + 1) * plane], dst);
            }
        }
        let value = Tensor::new(vec![samplers.len(), c, ph, pw], out)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::RoiAlign { input, samplers }, needs))
    }

    /// Reverse sweep seeded with `d(loss)/d(var)` for each `(var, seed)`.
    pub fn backward(&self, seeds: &[(Var, &[f64])]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (v, seed) in seeds {
            let len = self.nodes[v.0].value.len();
            if seed.len() != len {
                return Err(Error::LengthMismatch {
                    what: "backward seed",
                    left: len,
                    right: seed.len(),
                });
            }
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            for (a, b) in g.iter_mut().zip(seed.iter()) {
                *a += b;
            }
        }

        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>]| -> Option<Vec<f64>> {
            if !self.needs(v) {
                return None;
            }
            Some(grads[v.0].take().unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]))
        };
        match &node.op {
            Op::Leaf => {}
            Op::Relu(x) => {
                if let Some(mut gx) = acc(*x, grads) {
                    for ((g, d), y) in gx.iter_mut().zip(dy).zip(node.value.data()) {
                        if *y > 0.0 {
                            *g += d;
                        }
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::Sigmoid(x) => {
                if let Some(mut gx) = acc(*x, grads) {
                    for ((g, d), y) in gx.iter_mut().zip(dy).zip(node.value.data()) {
                        *g += d * y * (1.0 - y);
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(mut gv) = acc(v, grads) {
                        for (g, d) in gv.iter_mut().zip(dy) {
                            *g += d;
                        }
                        grads[v.0] = Some(gv);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(mut gx) = acc(*x, grads) {
                    for (g, d) in gx.iter_mut().zip(dy) {
                        *g += d;
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::Crop { input, height, width } => {
                if let Some(mut gx) = acc(*input, grads) {
                    let s = self.value(*input).shape();
                    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                    for p in 0..nc {
                        for r in 0..*height {
                            let src = &dy[(p * height + r) * width..(p * height + r + 1) * width];
                            let dst = &mut gx[(p * h + r) * w..(p * h + r) * w + width];
                            for (g, d) in dst.iter_mut().zip(src) {
                                *g += d;
                            }
                        }
                    }
                    grads[input.0] = Some(gx);
                }
            }
            Op::Upsample2x { input, rows, cols } => {
                if let Some(mut gx) = acc(*input, grads) {
                    let s = self.value(*input).shape();
                    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                    let w2 = 2 * w;
                    for p in 0..nc {
                        let dst = &mut gx[p * h * w..(p + 1) * h * w];
                        let src = &dy[p * 4 * h * w..(p + 1) * 4 * h * w];
                        for (oy, ry) in rows.iter().enumerate() {
                            let drow = &src[oy * w2..(oy + 1) * w2];
                            for (ox, rx) in cols.iter().enumerate() {
                                let d = drow[ox];
                                dst[ry.i0 * w + rx.i0] += ry.w0 * rx.w0 * d;
                                dst[ry.i0 * w + rx.i1] += ry.w0 * rx.w1 * d;
                                dst[ry.i1 * w + rx.i0] += ry.w1 * rx.w0 * d;
                                dst[ry.i1 * w + rx.i1] += ry.w1 * rx.w1 * d;
                            }
                        }
                    }
                    grads[input.0] = Some(gx);
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let xs = self.value(*input).shape();
                let ws = self.value(*weight).shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, k) = (ws[0], ws[2]);
                let ys = node.value.shape();
                let (ho, wo) = (ys[2], ys[3]);
                let plane = ho * wo;
                let ckk = c * k * k;
                if let Some(mut gb) = acc(*bias, grads) {
                    for ni in 0..n {
                        for (oi, g) in gb.iter_mut().enumerate() {
                            let start = (ni * o + oi) * plane;
                            *g += dy[start..start + plane].iter().sum::<f64>();
                        }
                    }
                    grads[bias.0] = Some(gb);
                }
                if let Some(mut gw) = acc(*weight, grads) {
                    let x = self.value(*input).data();
                    let mut col = vec![0.0; ckk * plane];
                    for ni in 0..n {
                        let dyn_ = &dy[ni * o * plane..(ni + 1) * o * plane];
                        im2col(&x[ni * c * h * w..(ni + 1) * c * h * w], c, h, w, k, *stride, *pad, ho, wo, &mut col);
                        gemm(o, plane, ckk, 1.0, dyn_, false, &col, true, 1.0, &mut gw);
                    }
                    grads[weight.0] = Some(gw);
                }
                if let Some(mut gx) = acc(*input, grads) {
                    let wt = self.value(*weight).data();
                    let mut dcol = vec![0.0; ckk * plane];
                    for ni in 0..n {
                        let dyn_ = &dy[ni * o * plane..(ni + 1) * o * plane];
                        gemm(ckk, o, plane, 1.0, wt, true, dyn_, false, 0.0, &mut dcol);
                        let gxn = &mut gx[ni * c * h * w..(ni + 1) * c * h * w];
                        col2im(&dcol, c, h, w, k, *stride, *pad, ho, wo, gxn);
                    }
                    grads[input.0] = Some(gx);
                }
            }
            Op::Linear { input, weight, bias } => {
                let xs = self.value(*input).shape();
                let (n, d) = (xs[0], xs[1]);
                let o = self.value(*weight).shape()[0];
                if let Some(mut gb) = acc(*bias, grads) {
                    for row in dy.chunks(o) {
                        for (g, v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                    grads[bias.0] = Some(gb);
                }
                if let Some(mut gw) = acc(*weight, grads) {
                    gemm(o, n, d, 1.0, dy, true, self.value(*input).data(), false, 1.0, &mut gw);
                    grads[weight.0] = Some(gw);
                }
                if let Some(mut gx) = acc(*input, grads) {
                    gemm(n, o, d, 1.0, dy, false, self.value(*weight).data(), false, 1.0, &mut gx);
                    grads[input.0] = Some(gx);
                }
            }
            Op::RoiAlign { input, samplers } => {
                if let Some(mut gx) = acc(*input, grads) {
                    let xs = self.value(*input).shape();
                    let (c, plane) = (xs[0], xs[1] * xs[2]);
                    let bins = node.value.shape()[2] * node.value.shape()[3];
                    for (r, s) in samplers.iter().enumerate() {
                        for ci in 0..c {
                            let src = &dy[(r * c + ci) * bins..(r * c + ci + 1) * bins];
                            s.scatter(src, &mut gx[ci * plane..(ci + 1) * plane]);
                        }
                    }
                    grads[input.0] = Some(gx);
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies in
/// `[0, w)`.
fn valid_range(wo: usize, w: usize, k_off: usize, stride: usize, pad: usize) -> (usize, usize) {
    // ix >= 0  <=>  ox * stride >= pad - k_off
    let lo = if k_off >= pad { 0 } else { (pad - k_off).div_ceil(stride) };
    // ix < w  <=>  ox * stride < w + pad - k_off
    let hi = (w + pad - k_off).div_ceil(stride).min(wo);
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [f64],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * plane..][..plane];
                let (lo, hi) = valid_range(wo, w, kx, stride, pad);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let base = lo * stride + kx - pad;
                    if stride == 1 {
                        dst[lo..hi].copy_from_slice(&srow[base..base + hi - lo]);
                    } else {
                        for (i, v) in dst[lo..hi].iter_mut().enumerate() {
                            *v = srow[base + i * stride];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f64],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * plane..][..plane];
                let (lo, hi) = valid_range(wo, w, kx, stride, pad);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &row[oy * wo..(oy + 1) * wo];
                    let base = lo * stride + kx - pad;
                    for (i, v) in srow[lo..hi].iter().enumerate() {
                        drow[base + i * stride] += v;
                    }
                }
            }
        }
    }
}
