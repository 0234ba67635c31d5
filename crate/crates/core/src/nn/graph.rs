//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together
//! with the values it produced. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients for parameters and variables.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{Gradients, ParamId, ParamStore};
use super::rotate::RotationMap;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Variable,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    MulRowScale(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    MeanRows(Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    AvgPool2(Var),
    Rotate(Var, Arc<RotationMap>),
    MaxN(Vec<Var>, Vec<u16>),
    L1Mean(Var, Tensor),
    SumAll(Var),
    DotConst(Var, Tensor),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    train: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, col: &mut [f64]) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let hw = ho * wo;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(col: &[f64], cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, x: &mut [f64]) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let hw = ho * wo;
    for ci in 0..cin {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'p> Graph<'p> {
    /// A graph whose parameters receive gradients.
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            train: true,
        }
    }

    /// A graph that records no gradient information for parameters.
    pub fn inference(store: &'p ParamStore) -> Self {
        Graph {
            train: false,
            ..Graph::new(store)
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Backward::wrt`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Variable, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: self.train,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn check_same(&self, ctx: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                context: ctx.into(),
                expected: self.shape(a).to_vec(),
                actual: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        let ng = self.needs(a);
        self.push(out, op, ng)
    }

    fn zip(&mut self, ctx: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.check_same(ctx, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out = Tensor::from_parts(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| s * x, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// `[m, n] + [n]` broadcast over rows.
    pub fn add_row_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if self.value(b).len() != n {
            return Err(Error::ShapeMismatch {
                context: "add_row_bias".into(),
                expected: vec![n],
                actual: self.shape(b).to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        let bias = self.value(b).data();
        for r in 0..m {
            for (o, bv) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::AddRowBias(a, b), ng))
    }

    /// `[c, h, w] + [c]` broadcast over spatial positions.
    pub fn add_channel_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3();
        if self.value(b).len() != c {
            return Err(Error::ShapeMismatch {
                context: "add_channel_bias".into(),
                expected: vec![c],
                actual: self.shape(b).to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        let bias = self.value(b).data().to_vec();
        for (ch, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v += bias[ch]);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::AddChannelBias(a, b), ng))
    }

    /// Scales row `i` of `[m, n]` by `w[i]` where `w` is `[m, 1]`.
    pub fn mul_row_scale(&mut self, a: Var, w: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if self.value(w).len() != m {
            return Err(Error::ShapeMismatch {
                context: "mul_row_scale".into(),
                expected: vec![m, 1],
                actual: self.shape(w).to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        let ws = self.value(w).data().to_vec();
        for (r, row) in out.data_mut().chunks_exact_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v *= ws[r]);
        }
        let ng = self.needs(a) || self.needs(w);
        Ok(self.push(out, Op::MulRowScale(a, w), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::ShapeMismatch {
                context: "matmul".into(),
                expected: vec![k, n],
                actual: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = t.dims2();
        let src = t.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.needs(a);
        self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::ShapeMismatch {
                context: "reshape".into(),
                expected: shape,
                actual: t.shape().to_vec(),
            });
        }
        let out = t.clone().reshaped(shape);
        let ng = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2();
        if start + width > n {
            return Err(Error::InvalidArgument(format!(
                "slice_cols {start}..{} out of {n} columns",
                start + width
            )));
        }
        let mut out = Vec::with_capacity(m * width);
        for r in 0..m {
            out.extend_from_slice(&t.data()[r * n + start..r * n + start + width]);
        }
        let ng = self.needs(a);
        Ok(self.push(Tensor::from_parts(vec![m, width], out), Op::SliceCols(a, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = self.value(*p).dims2();
            if pm != m {
                return Err(Error::ShapeMismatch {
                    context: "concat_cols".into(),
                    expected: vec![m, pn],
                    actual: vec![pm, pn],
                });
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).dims2().1;
        let mut out = Vec::new();
        let mut m = 0;
        for p in parts {
            let (pm, pn) = self.value(*p).dims2();
            if pn != n {
                return Err(Error::ShapeMismatch {
                    context: "concat_rows".into(),
                    expected: vec![pm, n],
                    actual: vec![pm, pn],
                });
            }
            out.extend_from_slice(self.value(*p).data());
            m += pm;
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of width n.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::ShapeMismatch {
                context: "layer_norm".into(),
                expected: vec![n],
                actual: self.shape(gamma).to_vec(),
            });
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = t.dims2();
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let ng = self.needs(a);
        self.push(Tensor::from_parts(vec![m, n], out), Op::SoftmaxRows(a), ng)
    }

    /// Mean over rows: `[m, n] → [1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = t.dims2();
        let mut out = vec![0.0; n];
        for row in t.data().chunks_exact(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        let ng = self.needs(a);
        self.push(Tensor::from_parts(vec![1, n], out), Op::MeanRows(a), ng)
    }

    /// Square-kernel convolution of `[cin, h, w]` with `[cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, wd) = self.value(x).dims3();
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] {
            return Err(Error::ShapeMismatch {
                context: "conv2d weight".into(),
                expected: vec![ws.first().copied().unwrap_or(0), cin, 3, 3],
                actual: ws,
            });
        }
        let (cout, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d input {h}x{wd} too small for kernel {k} (pad {pad}, stride {stride})"
            )));
        }
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let mut out = vec![0.0; cout * ho * wo];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        if k == 1 && stride == 1 && pad == 0 {
            gemm(cout, cin, ho * wo, wv, false, xv, false, &mut out, 0.0);
        } else {
            let mut col = vec![0.0; cin * k * k * ho * wo];
            im2col(xv, cin, h, wd, k, stride, pad, &mut col);
            gemm(cout, cin * k * k, ho * wo, wv, false, &col, false, &mut out, 0.0);
        }
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(
            Tensor::from_parts(vec![cout, ho, wo], out),
            Op::Conv2d { x, w, stride, pad },
            ng,
        ))
    }

    /// 2×2 average pooling with stride 2; spatial sides must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "avg_pool2 needs even sides, got {h}x{w}"
            )));
        }
        let (h2, w2) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            let src = &xv[ch * h * w..];
            for i in 0..h2 {
                for j in 0..w2 {
                    let a = src[2 * i * w + 2 * j]
                        + src[2 * i * w + 2 * j + 1]
                        + src[(2 * i + 1) * w + 2 * j]
                        + src[(2 * i + 1) * w + 2 * j + 1];
                    out[ch * h2 * w2 + i * w2 + j] = 0.25 * a;
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![c, h2, w2], out), Op::AvgPool2(x), ng))
    }

    /// Rotates every channel of a square `[c, s, s]` tensor.
    pub fn rotate(&mut self, x: Var, map: Arc<RotationMap>) -> Result<Var> {
        let (_, h, w) = self.value(x).dims3();
        if h != w || h != map.side() {
            return Err(Error::ShapeMismatch {
                context: "rotate".into(),
                expected: vec![map.side(), map.side()],
                actual: vec![h, w],
            });
        }
        let t = self.value(x);
        let mut out = vec![0.0; t.len()];
        map.apply(t.data(), &mut out);
        let shape = t.shape().to_vec();
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Rotate(x, map), ng))
    }

    /// Elementwise maximum over same-shaped tensors.
    pub fn max_n(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty() && parts.len() <= u16::MAX as usize);
        for p in &parts[1..] {
            self.check_same("max_n", parts[0], *p)?;
        }
        let mut out = self.value(parts[0]).clone();
        let mut arg = vec![0u16; out.len()];
        for (idx, p) in parts.iter().enumerate().skip(1) {
            for ((o, a), v) in out.data_mut().iter_mut().zip(arg.iter_mut()).zip(self.value(*p).data()) {
                if *v > *o {
                    *o = *v;
                    *a = idx as u16;
                }
            }
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(out, Op::MaxN(parts.to_vec(), arg), ng))
    }

    /// Mean absolute difference to a constant target.
    pub fn l1_mean(&mut self, a: Var, target: Tensor) -> Result<Var> {
        if self.shape(a) != target.shape() {
            return Err(Error::ShapeMismatch {
                context: "l1_mean".into(),
                expected: self.shape(a).to_vec(),
                actual: target.shape().to_vec(),
            });
        }
        let t = self.value(a);
        let n = t.len().max(1) as f64;
        let loss = t
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / n;
        let ng = self.needs(a);
        Ok(self.push(Tensor::scalar(loss), Op::L1Mean(a, target), ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    /// `Σ a ⊙ c` for a constant `c`.
    pub fn dot_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        if self.value(a).len() != c.len() {
            return Err(Error::ShapeMismatch {
                context: "dot_const".into(),
                expected: self.shape(a).to_vec(),
                actual: c.shape().to_vec(),
            });
        }
        let s = self.value(a).data().iter().zip(c.data()).map(|(x, y)| x * y).sum();
        let ng = self.needs(a);
        Ok(self.push(Tensor::scalar(s), Op::DotConst(a, c), ng))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf | Op::Variable | Op::Param(_)) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        let mut params = vec![None; self.store.len()];
        for (id, v) in &self.params {
            params[id.0] = grads[v.0].take();
        }
        Ok(Backward {
            grads,
            params: Gradients::from_vec(params),
        })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut [f64] {
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(self.value(v).shape()))
            .data_mut()
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf | Op::Variable | Op::Param(_) => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        axpy(self.grad_buf(grads, v), gd, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    axpy(self.grad_buf(grads, *a), gd, 1.0);
                }
                if self.needs(*b) {
                    axpy(self.grad_buf(grads, *b), gd, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    for ((o, g), y) in self.grad_buf(grads, *a).iter_mut().zip(gd).zip(bv) {
                        *o += g * y;
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    for ((o, g), x) in self.grad_buf(grads, *b).iter_mut().zip(gd).zip(av) {
                        *o += g * x;
                    }
                }
            }
            Op::Scale(a, s) => axpy(self.grad_buf(grads, *a), gd, *s),
            Op::AddRowBias(a, b) => {
                if self.needs(*a) {
                    axpy(self.grad_buf(grads, *a), gd, 1.0);
                }
                if self.needs(*b) {
                    let n = self.value(*b).len();
                    let gb = self.grad_buf(grads, *b);
                    for row in gd.chunks_exact(n) {
                        axpy(gb, row, 1.0);
                    }
                }
            }
            Op::AddChannelBias(a, b) => {
                if self.needs(*a) {
                    axpy(self.grad_buf(grads, *a), gd, 1.0);
                }
                if self.needs(*b) {
                    let c = self.value(*b).len();
                    let plane = gd.len() / c;
                    let gb = self.grad_buf(grads, *b);
                    for (ch, p) in gd.chunks_exact(plane).enumerate() {
                        gb[ch] += p.iter().sum::<f64>();
                    }
                }
            }
            Op::MulRowScale(a, w) => {
                let (_, n) = self.value(*a).dims2();
                if self.needs(*a) {
                    let ws = self.value(*w).data();
                    let ga = self.grad_buf(grads, *a);
                    for (r, (orow, grow)) in ga.chunks_exact_mut(n).zip(gd.chunks_exact(n)).enumerate() {
                        for (o, gv) in orow.iter_mut().zip(grow) {
                            *o += gv * ws[r];
                        }
                    }
                }
                if self.needs(*w) {
                    let av = self.value(*a).data();
                    let gw = self.grad_buf(grads, *w);
                    for (r, (arow, grow)) in av.chunks_exact(n).zip(gd.chunks_exact(n)).enumerate() {
                        gw[r] += arow.iter().zip(grow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    gemm(m, n, k, gd, false, bv, true, self.grad_buf(grads, *a), 1.0);
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    gemm(k, m, n, av, true, gd, false, self.grad_buf(grads, *b), 1.0);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2();
                let ga = self.grad_buf(grads, *a);
                for r in 0..m {
                    for c in 0..n {
                        ga[r * n + c] += gd[c * m + r];
                    }
                }
            }
            Op::Reshape(a) => axpy(self.grad_buf(grads, *a), gd, 1.0),
            Op::SliceCols(a, start) => {
                let (m, n) = self.value(*a).dims2();
                let w = g.dims2().1;
                let ga = self.grad_buf(grads, *a);
                for r in 0..m {
                    axpy(&mut ga[r * n + start..r * n + start + w], &gd[r * w..(r + 1) * w], 1.0);
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = g.dims2();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).dims2().1;
                    if self.needs(*p) {
                        let gp = self.grad_buf(grads, *p);
                        for r in 0..m {
                            axpy(&mut gp[r * w..(r + 1) * w], &gd[r * n + off..r * n + off + w], 1.0);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.needs(*p) {
                        axpy(self.grad_buf(grads, *p), &gd[off..off + len], 1.0);
                    }
                    off += len;
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                for ((o, gv), x) in self.grad_buf(grads, *a).iter_mut().zip(gd).zip(xv) {
                    *o += gv * gelu_grad(*x);
                }
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                for ((o, gv), x) in self.grad_buf(grads, *a).iter_mut().zip(gd).zip(xv) {
                    if *x > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let yv = self.nodes[i].value.as_ref().expect("value").data();
                for ((o, gv), y) in self.grad_buf(grads, *a).iter_mut().zip(gd).zip(yv) {
                    *o += gv * y * (1.0 - y);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = self.value(*x).dims2();
                if self.needs(*gamma) {
                    let gg = self.grad_buf(grads, *gamma);
                    for (grow, hrow) in gd.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if self.needs(*beta) {
                    let gb = self.grad_buf(grads, *beta);
                    for grow in gd.chunks_exact(n) {
                        axpy(gb, grow, 1.0);
                    }
                }
                if self.needs(*x) {
                    let gam = self.value(*gamma).data().to_vec();
                    let gx = self.grad_buf(grads, *x);
                    let mut gh = vec![0.0; n];
                    for r in 0..m {
                        let grow = &gd[r * n..(r + 1) * n];
                        let hrow = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            gh[j] = grow[j] * gam[j];
                        }
                        let mean_gh = gh.iter().sum::<f64>() / n as f64;
                        let mean_ghh = gh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[r * n + j] += rstd[r] * (gh[j] - mean_gh - hrow[j] * mean_ghh);
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let y = self.nodes[i].value.as_ref().expect("value");
                let (_, n) = y.dims2();
                let ga = self.grad_buf(grads, *a);
                for ((orow, grow), yrow) in ga
                    .chunks_exact_mut(n)
                    .zip(gd.chunks_exact(n))
                    .zip(y.data().chunks_exact(n))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        orow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::MeanRows(a) => {
                let (m, n) = self.value(*a).dims2();
                let ga = self.grad_buf(grads, *a);
                for row in ga.chunks_exact_mut(n) {
                    axpy(row, gd, 1.0 / m as f64);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (cin, h, wd) = self.value(*x).dims3();
                let ws = self.shape(*w);
                let (cout, k) = (ws[0], ws[2]);
                let (_, ho, wo) = g.dims3();
                let xv = self.value(*x).data();
                let pointwise = k == 1 && *stride == 1 && *pad == 0;
                let owned;
                let col: &[f64] = if pointwise {
                    xv
                } else {
                    let mut c = vec![0.0; cin * k * k * ho * wo];
                    im2col(xv, cin, h, wd, k, *stride, *pad, &mut c);
                    owned = c;
                    &owned
                };
                if self.needs(*w) {
                    gemm(
                        cout,
                        ho * wo,
                        cin * k * k,
                        gd,
                        false,
                        col,
                        true,
                        self.grad_buf(grads, *w),
                        1.0,
                    );
                }
                if self.needs(*x) {
                    let wv = self.value(*w).data();
                    if pointwise {
                        gemm(cin, cout, ho * wo, wv, true, gd, false, self.grad_buf(grads, *x), 1.0);
                    } else {
                        let mut dcol = vec![0.0; cin * k * k * ho * wo];
                        gemm(cin * k * k, cout, ho * wo, wv, true, gd, false, &mut dcol, 0.0);
                        col2im_add(&dcol, cin, h, wd, k, *stride, *pad, self.grad_buf(grads, *x));
                    }
                }
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = self.value(*x).dims3();
                let (h2, w2) = (h / 2, w / 2);
                let gx = self.grad_buf(grads, *x);
                for ch in 0..c {
                    for r in 0..h2 {
                        for col in 0..w2 {
                            let v = 0.25 * gd[ch * h2 * w2 + r * w2 + col];
                            let base = ch * h * w;
                            gx[base + 2 * r * w + 2 * col] += v;
                            gx[base + 2 * r * w + 2 * col + 1] += v;
                            gx[base + (2 * r + 1) * w + 2 * col] += v;
                            gx[base + (2 * r + 1) * w + 2 * col + 1] += v;
                        }
                    }
                }
            }
            Op::Rotate(x, map) => map.apply_transpose_add(gd, self.grad_buf(grads, *x)),
            Op::MaxN(parts, arg) => {
                for (idx, p) in parts.iter().enumerate() {
                    if !self.needs(*p) {
                        continue;
                    }
                    let gp = self.grad_buf(grads, *p);
                    for ((o, gv), a) in gp.iter_mut().zip(gd).zip(arg) {
                        if *a as usize == idx {
                            *o += gv;
                        }
                    }
                }
            }
            Op::L1Mean(a, target) => {
                let av = self.value(*a).data();
                let n = av.len().max(1) as f64;
                let g0 = gd[0] / n;
                for ((o, x), t) in self.grad_buf(grads, *a).iter_mut().zip(av).zip(target.data()) {
                    let d = x - t;
                    if d > 0.0 {
                        *o += g0;
                    } else if d < 0.0 {
                        *o -= g0;
                    }
                }
            }
            Op::SumAll(a) => {
                let g0 = gd[0];
                self.grad_buf(grads, *a).iter_mut().for_each(|o| *o += g0);
            }
            Op::DotConst(a, c) => axpy(self.grad_buf(grads, *a), c.data(), gd[0]),
        }
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Result of [`Graph::backward`].
pub struct Backward {
    grads: Vec<Option<Tensor>>,
    params: Gradients,
}

impl Backward {
    /// Gradient of a [`Graph::variable`] leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;

    /// Checks d(loss)/d(input) against central differences for a closure
    /// that builds the loss from a single variable.
    fn check_input_grad(x0: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.variable(x0.clone());
        let loss = build(&mut g, x);
        let bw = g.backward(loss).unwrap();
        let analytic = bw.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(x0.shape()));
        let eval = |t: Tensor| {
            let mut g = Graph::new(&store);
            let x = g.variable(t);
            let l = build(&mut g, x);
            g.value(l).data()[0]
        };
        let h = 1e-5;
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            let fd = (eval(p) - eval(m)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                "element {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        Init::new(seed).normal(shape, 1.0)
    }

    #[test]
    fn grad_matmul_transpose_softmax() {
        let w = rand_tensor(&[4, 3], 2);
        let c = rand_tensor(&[3, 3], 3);
        check_input_grad(rand_tensor(&[3, 4], 1), |g, x| {
            let wv = g.input(w.clone());
            let y = g.matmul(x, wv).unwrap();
            let yt = g.transpose(y);
            let s = g.softmax_rows(yt);
            g.dot_const(s, c.clone()).unwrap()
        });
    }

    #[test]
    fn grad_layer_norm_gelu_sigmoid() {
        let gamma = rand_tensor(&[5], 4);
        let beta = rand_tensor(&[5], 5);
        let c = rand_tensor(&[2, 5], 6);
        check_input_grad(rand_tensor(&[2, 5], 7), |g, x| {
            let ga = g.input(gamma.clone());
            let be = g.input(beta.clone());
            let y = g.layer_norm(x, ga, be).unwrap();
            let y = g.gelu(y);
            let s = g.sigmoid(y);
            let p = g.mul(s, y).unwrap();
            g.dot_const(p, c.clone()).unwrap()
        });
    }

    #[test]
    fn grad_conv_pool_rotate_max() {
        let w = rand_tensor(&[3, 2, 3, 3], 8);
        let w1 = rand_tensor(&[3, 2, 1, 1], 9);
        let ws2 = rand_tensor(&[3, 2, 2, 2], 13);
        let c = rand_tensor(&[3, 3, 3], 10);
        let map = Arc::new(RotationMap::new(6, 0.4));
        let map2 = Arc::new(RotationMap::new(6, std::f64::consts::PI / 2.0));
        check_input_grad(rand_tensor(&[2, 6, 6], 11), |g, x| {
            let wv = g.input(w.clone());
            let w1v = g.input(w1.clone());
            let a = g.conv2d(x, wv, 1, 1).unwrap();
            let b = g.conv2d(x, w1v, 1, 0).unwrap();
            let r = g.rotate(a, map.clone()).unwrap();
            let r2 = g.rotate(b, map2.clone()).unwrap();
            let m = g.max_n(&[r, r2, a]).unwrap();
            let p = g.avg_pool2(m).unwrap();
            let ws2v = g.input(ws2.clone());
            let s2 = g.conv2d(x, ws2v, 2, 0).unwrap();
            let s2 = g.sum_all(s2);
            let pooled = g.dot_const(p, c.clone()).unwrap();
            g.add(pooled, s2).unwrap()
        });
    }

    #[test]
    fn grad_concat_slice_bias_rowscale() {
        let b = rand_tensor(&[6], 12);
        let c = rand_tensor(&[1, 3], 14);
        check_input_grad(rand_tensor(&[2, 3], 15), |g, x| {
            let cat = g.concat_cols(&[x, x]).unwrap();
            let bv = g.input(b.clone());
            let y = g.add_row_bias(cat, bv).unwrap();
            let s = g.slice_cols(y, 2, 3).unwrap();
            let w = g.slice_cols(y, 0, 1).unwrap();
            let r = g.mul_row_scale(s, w).unwrap();
            let rows = g.concat_rows(&[r, x]).unwrap();
            let m = g.mean_rows(rows);
            let cv = g.input(c.clone());
            let d = g.sub(m, cv).unwrap();
            g.l1_mean(d, Tensor::zeros(&[1, 3])).unwrap()
        });
    }

    #[test]
    fn param_gradients_accumulate_across_uses() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(vec![2.0, -1.0]), true);
        let mut g = Graph::new(&store);
        let a = g.param(id);
        let b = g.param(id);
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let l = g.sum_all(y);
        let bw = g.backward(l).unwrap();
        assert_eq!(bw.params().get(id).unwrap().data(), &[4.0, -2.0]);
    }

    #[test]
    fn inference_graph_has_no_param_grads() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(vec![1.0]), true);
        let mut g = Graph::inference(&store);
        let a = g.param(id);
        let l = g.sum_all(a);
        let bw = g.backward(l).unwrap();
        assert!(bw.params().get(id).is_none());
    }

    #[test]
    fn shape_errors_are_reported() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 2]));
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, a).is_err());
        assert!(g.backward(a).is_err());
    }
}
