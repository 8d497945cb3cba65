//! Reverse-mode differentiation over a linear record of layer operations.
//!
//! Spatial activations use a channel-major `[C, B, H, W]` layout so a whole
//! batch convolves with one matrix product; feature matrices are `[B, F]`.
//! Every op keeps whatever it needs for its backward pass, and
//! [`Tape::backward`] walks the record in reverse, accumulating gradients.

use std::collections::BTreeMap;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        col: Vec<f64>,
    },
    /// Per-sample normalization over (C, H, W) with per-channel affine.
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    batch: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.batch * self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.cols();
    let mut col = vec![0.0; g.rows() * cols];
    let plane = g.h * g.w;
    for ci in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let src = &x[(ci * g.batch + b) * plane..(ci * g.batch + b + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = (b * g.ho + oy) * g.wo;
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.cols();
    let plane = g.h * g.w;
    let mut x = vec![0.0; g.cin * g.batch * plane];
    for ci in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let dst = &mut x[(ci * g.batch + b) * plane..(ci * g.batch + b + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = (b * g.ho + oy) * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[iy as usize * g.w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        debug_assert!(value.is_finite(), "non-finite activation from {op:?}");
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        self.push(Op::Param(name.to_string()), value)
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<ConvGeom> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(Error::Shape(format!("conv input {xs:?} vs weight {ws:?}")));
        }
        let (h, wd, k) = (xs[2], xs[3], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(Error::Shape(format!("conv kernel {k} too large for {h}x{wd}")));
        }
        Ok(ConvGeom {
            cin: xs[0],
            batch: xs[1],
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        })
    }

    /// 2-D convolution; `x: [Cin, B, H, W]`, `w: [Cout, Cin, k, k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let g = self.conv_geom(x, w, stride, pad)?;
        let cout = self.value(w).dim(0);
        if self.value(b).shape() != [cout] {
            return Err(Error::Shape(format!("conv bias {:?} for {cout} channels", self.value(b).shape())));
        }
        let col = im2col(self.value(x).data(), &g);
        let (rows, cols) = (g.rows(), g.cols());
        let mut out = vec![0.0; cout * cols];
        gemm(
            cout,
            rows,
            cols,
            self.value(w).data(),
            rows as isize,
            1,
            &col,
            cols as isize,
            1,
            0.0,
            &mut out,
        );
        let bias = self.value(b).data();
        for (o, chunk) in out.chunks_mut(cols).enumerate() {
            let bo = bias[o];
            chunk.iter_mut().for_each(|v| *v += bo);
        }
        let value = Tensor::new(vec![cout, g.batch, g.ho, g.wo], out)?;
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                col,
            },
            value,
        ))
    }

    pub fn norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("norm expects 4-D input, got {xs:?}")));
        }
        let (c, batch, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape("norm affine parameters do not match channels".into()));
        }
        let xv = self.value(x).data();
        let count = (c * plane) as f64;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; batch];
        for b in 0..batch {
            let mut sum = 0.0;
            for ch in 0..c {
                sum += xv[(ch * batch + b) * plane..(ch * batch + b + 1) * plane].iter().sum::<f64>();
            }
            let mean = sum / count;
            let mut var = 0.0;
            for ch in 0..c {
                var += xv[(ch * batch + b) * plane..(ch * batch + b + 1) * plane]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>();
            }
            let is = 1.0 / (var / count + NORM_EPS).sqrt();
            inv_std[b] = is;
            for ch in 0..c {
                let r = (ch * batch + b) * plane..(ch * batch + b + 1) * plane;
                for (o, v) in xhat[r.clone()].iter_mut().zip(&xv[r]) {
                    *o = (v - mean) * is;
                }
            }
        }
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = xhat.clone();
        for ch in 0..c {
            let seg = &mut out[ch * batch * plane..(ch + 1) * batch * plane];
            seg.iter_mut().for_each(|v| *v = *v * gv[ch] + bv[ch]);
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            value,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(Op::Relu { x }, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(Op::Add { a, b }, value))
    }

    /// `[C, B, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("pool expects 4-D input, got {xs:?}")));
        }
        let (c, batch, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; batch * c];
        for ch in 0..c {
            for b in 0..batch {
                let s: f64 = xv[(ch * batch + b) * plane..(ch * batch + b + 1) * plane].iter().sum();
                out[b * c + ch] = s / plane as f64;
            }
        }
        let value = Tensor::new(vec![batch, c], out)?;
        Ok(self.push(Op::GlobalAvgPool { x }, value))
    }

    /// `y = x w^T + b` with `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.value(b).shape() != [ws[0]] {
            return Err(Error::Shape(format!("dense input {xs:?} vs weight {ws:?}")));
        }
        let (batch, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; batch * fout];
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(
            batch,
            fin,
            fout,
            self.value(x).data(),
            fin as isize,
            1,
            self.value(w).data(),
            1,
            fin as isize,
            1.0,
            &mut out,
        );
        let value = Tensor::new(vec![batch, fout], out)?;
        Ok(self.push(Op::Dense { x, w, b }, value))
    }

    /// Propagates the given output gradients back through the record.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.shape() != self.value(*v).shape() {
                return Err(Error::Shape(format!(
                    "seed gradient {:?} for value {:?}",
                    g.shape(),
                    self.value(*v).shape()
                )));
            }
            accumulate(&mut grads, *v, g.clone());
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param(_) => {
                    grads[idx] = Some(dy);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    col,
                } => {
                    let g = self.conv_geom(*x, *w, *stride, *pad)?;
                    let cout = self.value(*w).dim(0);
                    let (rows, cols) = (g.rows(), g.cols());
                    let dyv = dy.data();
                    let db: Vec<f64> = dyv.chunks(cols).map(|c| c.iter().sum()).collect();
                    let mut dw = vec![0.0; cout * rows];
                    gemm(cout, cols, rows, dyv, cols as isize, 1, col, 1, cols as isize, 0.0, &mut dw);
                    let mut dcol = vec![0.0; rows * cols];
                    gemm(
                        rows,
                        cout,
                        cols,
                        self.value(*w).data(),
                        1,
                        rows as isize,
                        dyv,
                        cols as isize,
                        1,
                        0.0,
                        &mut dcol,
                    );
                    let dx = col2im(&dcol, &g);
                    accumulate(&mut grads, *b, Tensor::new(vec![cout], db)?);
                    accumulate(&mut grads, *w, Tensor::new(self.value(*w).shape().to_vec(), dw)?);
                    accumulate(&mut grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let xs = self.value(*x).shape();
                    let (c, batch, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                    let gv = self.value(*gamma).data();
                    let dyv = dy.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dxhat = vec![0.0; dyv.len()];
                    for ch in 0..c {
                        let r = ch * batch * plane..(ch + 1) * batch * plane;
                        for ((d, &g), &xh) in dxhat[r.clone()].iter_mut().zip(&dyv[r.clone()]).zip(&xhat[r]) {
                            dgamma[ch] += g * xh;
                            dbeta[ch] += g;
                            *d = g * gv[ch];
                        }
                    }
                    let count = (c * plane) as f64;
                    let mut dx = vec![0.0; dyv.len()];
                    for b in 0..batch {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for ch in 0..c {
                            let r = (ch * batch + b) * plane..(ch * batch + b + 1) * plane;
                            for (d, xh) in dxhat[r.clone()].iter().zip(&xhat[r]) {
                                s1 += d;
                                s2 += d * xh;
                            }
                        }
                        let (m1, m2) = (s1 / count, s2 / count);
                        for ch in 0..c {
                            let r = (ch * batch + b) * plane..(ch * batch + b + 1) * plane;
                            for ((o, d), xh) in dx[r.clone()].iter_mut().zip(&dxhat[r.clone()]).zip(&xhat[r]) {
                                *o = inv_std[b] * (d - m1 - xh * m2);
                            }
                        }
                    }
                    accumulate(&mut grads, *gamma, Tensor::new(vec![c], dgamma)?);
                    accumulate(&mut grads, *beta, Tensor::new(vec![c], dbeta)?);
                    accumulate(&mut grads, *x, Tensor::new(xs.to_vec(), dx)?);
                }
                Op::Relu { x } => {
                    let mut dx = dy;
                    for (d, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::GlobalAvgPool { x } => {
                    let xs = self.value(*x).shape();
                    let (c, batch, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                    let mut dx = vec![0.0; c * batch * plane];
                    for ch in 0..c {
                        for b in 0..batch {
                            let g = dy.data()[b * c + ch] / plane as f64;
                            dx[(ch * batch + b) * plane..(ch * batch + b + 1) * plane].fill(g);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xs.to_vec(), dx)?);
                }
                Op::Dense { x, w, b } => {
                    let (batch, fin) = (self.value(*x).dim(0), self.value(*x).dim(1));
                    let fout = self.value(*w).dim(0);
                    let dyv = dy.data();
                    let mut db = vec![0.0; fout];
                    for row in dyv.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    let mut dw = vec![0.0; fout * fin];
                    gemm(
                        fout,
                        batch,
                        fin,
                        dyv,
                        1,
                        fout as isize,
                        self.value(*x).data(),
                        fin as isize,
                        1,
                        0.0,
                        &mut dw,
                    );
                    let mut dx = vec![0.0; batch * fin];
                    gemm(
                        batch,
                        fout,
                        fin,
                        dyv,
                        fout as isize,
                        1,
                        self.value(*w).data(),
                        fin as isize,
                        1,
                        0.0,
                        &mut dx,
                    );
                    accumulate(&mut grads, *b, Tensor::new(vec![fout], db)?);
                    accumulate(&mut grads, *w, Tensor::new(vec![fout, fin], dw)?);
                    accumulate(&mut grads, *x, Tensor::new(vec![batch, fin], dx)?);
                }
            }
        }

        let mut params = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = grads[idx]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match params.get_mut(name) {
                    None => {
                        params.insert(name.clone(), g);
                    }
                    Some(existing) => Tensor::add_assign(existing, &g),
                }
            }
        }
        Ok(Gradients { by_var: grads, params })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[derive(Debug)]
pub struct Gradients {
    by_var: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a leaf (input or parameter) node.
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.by_var[v.0].as_ref()
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}
