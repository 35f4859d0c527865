//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! Every op appends a node holding its output value and the indices of its
//! parents, so the tape is topologically sorted by construction and
//! [`Tape::backward`] is a single reverse sweep. Values are immutable once
//! recorded; a fresh tape is built per forward pass.

use super::Tensor;
use crate::error::{Error, Result};
use crate::linalg::{self, ConvGeom};
use crate::rng::Rng;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Relu,
    Sigmoid,
    Tanh,
    Sign,
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Clip {
        x: Var,
        lo: f32,
        hi: f32,
    },
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
    },
    AddScalar {
        x: Var,
    },
    MulScalar {
        x: Var,
        s: f32,
    },
    /// s - x
    RsubScalar {
        x: Var,
    },
    /// `[rows.., n] + [n]`, broadcast over leading dims.
    AddRowVec {
        x: Var,
        b: Var,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: ConvGeom,
    },
    /// Adjoint of stride-1 same-padded conv2d. Weight layout is
    /// `[kh, kw, c_out, c_in]`, i.e. the conv layout of the reverse direction.
    TConv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: ConvGeom,
    },
    MaxPool2x2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2x {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    SliceLastDim {
        x: Var,
        start: usize,
        len: usize,
    },
    SumAll {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    /// Fused stabilized softmax + mean cross-entropy against integer labels.
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    /// Inverted dropout; mask entries are 0 or 1/keep.
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        var: Vec<f32>,
        eps: f32,
        train: bool,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`]. Intermediate nodes are
/// freed during the sweep; only leaves keep their gradients.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that no gradient flows into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| match kind {
            UnaryKind::Neg => -v,
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Relu => v.max(0.0),
            UnaryKind::Sigmoid => {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            }
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Sign => {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        });
        let req = self.req(x);
        self.push(value, Op::Unary { kind, x }, req)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    /// Elementwise sign with sign(0) = 0; gradient is 0 everywhere.
    pub fn sign(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sign, x)
    }

    /// Clamp to `[lo, hi]`. Gradient is 1 strictly inside the range, else 0.
    pub fn clip(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid(format!("clip range [{lo}, {hi}] is empty")));
        }
        let value = self.nodes[x.0].value.map(|v| v.clamp(lo, hi));
        let req = self.req(x);
        Ok(self.push(value, Op::Clip { x, lo, hi }, req))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| {
            match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            }
        })?;
        let req = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Binary { kind, a, b }, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Var {
        let value = self.nodes[x.0].value.map(|v| v + s);
        let req = self.req(x);
        self.push(value, Op::AddScalar { x }, req)
    }

    pub fn mul_scalar(&mut self, x: Var, s: f32) -> Var {
        let value = self.nodes[x.0].value.map(|v| v * s);
        let req = self.req(x);
        self.push(value, Op::MulScalar { x, s }, req)
    }

    /// s - x
    pub fn rsub_scalar(&mut self, x: Var, s: f32) -> Var {
        let value = self.nodes[x.0].value.map(|v| s - v);
        let req = self.req(x);
        self.push(value, Op::RsubScalar { x }, req)
    }

    /// Broadcast-add a `[n]` vector to the last dimension of `x`.
    pub fn add_row_vec(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[b.0].value;
        let n = *xv.shape().last().expect("rank >= 1");
        if bv.shape() != [n] {
            return Err(Error::shape("add_row_vec", &[n], bv.shape()));
        }
        let mut data = xv.data().to_vec();
        let bd = bv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &add) in row.iter_mut().zip(&bd) {
                *v += add;
            }
        }
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        let req = self.req(x) || self.req(b);
        Ok(self.push(value, Op::AddRowVec { x, b }, req))
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let value = Tensor {
            shape: vec![m, n],
            data: linalg::mm_nn(av.data(), bv.data(), m, k, n),
        };
        let req = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Matmul { a, b }, req))
    }

    /// Stride-1 same-padded NHWC convolution. `x` is `[n,h,w,c_in]`,
    /// `w` is `[kh,kw,c_in,c_out]`, `b` is `[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if xv.rank() != 4 || wv.rank() != 4 || xv.shape()[3] != wv.shape()[2] {
            return Err(Error::shape("conv2d", xv.shape(), wv.shape()));
        }
        let g = ConvGeom {
            n: xv.shape()[0],
            h: xv.shape()[1],
            w: xv.shape()[2],
            c_in: xv.shape()[3],
            kh: wv.shape()[0],
            kw: wv.shape()[1],
            c_out: wv.shape()[3],
        };
        g.validate()?;
        if let Some(b) = b {
            let bs = self.nodes[b.0].value.shape();
            if bs != [g.c_out] {
                return Err(Error::shape("conv2d bias", &[g.c_out], bs));
            }
        }
        let bias = b.map(|b| self.nodes[b.0].value.data().to_vec());
        let data = linalg::conv_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            bias.as_deref(),
            &g,
        );
        let value = Tensor {
            shape: vec![g.n, g.h, g.w, g.c_out],
            data,
        };
        let req = self.req(x) || self.req(w) || b.map(|b| self.req(b)).unwrap_or(false);
        Ok(self.push(value, Op::Conv2d { x, w, b, g }, req))
    }

    /// Adjoint of [`Tape::conv2d`] with the same spatial geometry (stride 1,
    /// same padding). `x` is `[n,h,w,c_in]`, `w` is `[kh,kw,c_out,c_in]`,
    /// `b` is `[c_out]`.
    pub fn tconv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if xv.rank() != 4 || wv.rank() != 4 || xv.shape()[3] != wv.shape()[3] {
            return Err(Error::shape("tconv2d", xv.shape(), wv.shape()));
        }
        // Geometry of the conv this op is the adjoint of: it maps our output
        // (c_out channels) to our input (c_in channels).
        let g = ConvGeom {
            n: xv.shape()[0],
            h: xv.shape()[1],
            w: xv.shape()[2],
            c_in: wv.shape()[2],
            kh: wv.shape()[0],
            kw: wv.shape()[1],
            c_out: xv.shape()[3],
        };
        g.validate()?;
        if let Some(b) = b {
            let bs = self.nodes[b.0].value.shape();
            if bs != [g.c_in] {
                return Err(Error::shape("tconv2d bias", &[g.c_in], bs));
            }
        }
        let mut data = linalg::conv_backward_data(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            &g,
        );
        if let Some(b) = b {
            let bias = self.nodes[b.0].value.data().to_vec();
            for row in data.chunks_mut(g.c_in) {
                for (v, &add) in row.iter_mut().zip(&bias) {
                    *v += add;
                }
            }
        }
        let value = Tensor {
            shape: vec![g.n, g.h, g.w, g.c_in],
            data,
        };
        let req = self.req(x) || self.req(w) || b.map(|b| self.req(b)).unwrap_or(false);
        Ok(self.push(value, Op::TConv2d { x, w, b, g }, req))
    }

    /// 2x2 max pooling with stride 2. Ties resolve to the first maximum in
    /// row-major scan order.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 4 || xv.shape()[1] % 2 != 0 || xv.shape()[2] % 2 != 0 {
            return Err(Error::invalid(format!(
                "maxpool2x2 needs rank-4 input with even H and W, got {:?}",
                xv.shape()
            )));
        }
        let (n, h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = xv.data();
        let mut out = vec![0.0f32; n * oh * ow * c];
        let mut argmax = vec![0u32; out.len()];
        for img in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0u32;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx =
                                    ((img * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_idx = idx as u32;
                                }
                            }
                        }
                        let o = ((img * oh + oy) * ow + ox) * c + ch;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let value = Tensor {
            shape: vec![n, oh, ow, c],
            data: out,
        };
        let req = self.req(x);
        Ok(self.push(value, Op::MaxPool2x2 { x, argmax }, req))
    }

    /// Nearest-neighbour 2x upsampling: `[n,h,w,c] -> [n,2h,2w,c]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 4 {
            return Err(Error::invalid(format!(
                "upsample2x needs rank-4 input, got {:?}",
                xv.shape()
            )));
        }
        let (n, h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let xd = xv.data();
        let mut out = vec![0.0f32; n * 4 * h * w * c];
        for img in 0..n {
            for y in 0..2 * h {
                for x_ in 0..2 * w {
                    let src = ((img * h + y / 2) * w + x_ / 2) * c;
                    let dst = ((img * 2 * h + y) * 2 * w + x_) * c;
                    out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                }
            }
        }
        let value = Tensor {
            shape: vec![n, 2 * h, 2 * w, c],
            data: out,
        };
        let req = self.req(x);
        Ok(self.push(value, Op::Upsample2x { x }, req))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        let req = self.req(x);
        Ok(self.push(value, Op::Reshape { x }, req))
    }

    /// Take columns `[start, start+len)` of the last dimension.
    pub fn slice_last_dim(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let n = *xv.shape().last().expect("rank >= 1");
        if len == 0 || start + len > n {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) out of range for last dim {n}",
                start + len
            )));
        }
        let rows = xv.len() / n;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * n + start..r * n + start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        let value = Tensor { shape, data };
        let req = self.req(x);
        Ok(self.push(value, Op::SliceLastDim { x, start, len }, req))
    }

    /// Sum of all elements as a `[1]` scalar, accumulated in f64.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum_f64() as f32;
        let req = self.req(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, req)
    }

    /// Mean of all elements as a `[1]` scalar, accumulated in f64.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let m = self.nodes[x.0].value.mean_f64() as f32;
        let req = self.req(x);
        self.push(Tensor::scalar(m), Op::MeanAll { x }, req)
    }

    /// Mean cross-entropy between softmax(logits) and integer labels, fused
    /// and max-stabilized. `logits` is `[batch, classes]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                &[labels.len(), lv.shape().get(1).copied().unwrap_or(0)],
                lv.shape(),
            ));
        }
        let classes = lv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let batch = labels.len();
        let mut probs = vec![0.0f32; batch * classes];
        let mut loss = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv.data()[i * classes..(i + 1) * classes];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for &v in row {
                denom += ((v - max) as f64).exp();
            }
            for (j, &v) in row.iter().enumerate() {
                probs[i * classes + j] = (((v - max) as f64).exp() / denom) as f32;
            }
            loss -= (row[y] - max) as f64 - denom.ln();
        }
        let value = Tensor::scalar((loss / batch as f64) as f32);
        let req = self.req(logits);
        Ok(self.push(
            value,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            req,
        ))
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// 1/(1-rate) so the expectation is unchanged.
    pub fn dropout(&mut self, x: Var, rate: f32, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} not in [0, 1)")));
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let xv = &self.nodes[x.0].value;
        let mask: Vec<f32> = (0..xv.len())
            .map(|_| if rng.uniform() < keep { scale } else { 0.0 })
            .collect();
        let data = xv
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        let req = self.req(x);
        Ok(self.push(value, Op::Dropout { x, mask }, req))
    }

    /// Batch normalization over an NHWC tensor, normalizing per channel with
    /// the batch statistics. Returns the output together with the biased
    /// batch mean and variance so the caller can update running stats.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, Vec<f32>, Vec<f32>)> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 4 {
            return Err(Error::invalid(format!(
                "batch_norm needs rank-4 input, got {:?}",
                xv.shape()
            )));
        }
        let c = xv.shape()[3];
        let m = xv.len() / c;
        let mut mean = vec![0.0f64; c];
        for row in xv.data().chunks(c) {
            for (s, &v) in mean.iter_mut().zip(row) {
                *s += v as f64;
            }
        }
        for s in &mut mean {
            *s /= m as f64;
        }
        let mut var = vec![0.0f64; c];
        for row in xv.data().chunks(c) {
            for ((s, &mu), &v) in var.iter_mut().zip(&mean).zip(row) {
                let d = v as f64 - mu;
                *s += d * d;
            }
        }
        for s in &mut var {
            *s /= m as f64;
        }
        let mean: Vec<f32> = mean.iter().map(|&v| v as f32).collect();
        let var: Vec<f32> = var.iter().map(|&v| v as f32).collect();
        let v = self.batch_norm_with(x, gamma, beta, mean.clone(), var.clone(), eps, true)?;
        Ok((v, mean, var))
    }

    /// Batch normalization using frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        self.batch_norm_with(
            x,
            gamma,
            beta,
            running_mean.to_vec(),
            running_var.to_vec(),
            eps,
            false,
        )
    }

    fn batch_norm_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        var: Vec<f32>,
        eps: f32,
        train: bool,
    ) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let c = xv.shape()[3];
        let gs = self.nodes[gamma.0].value.shape();
        let bs = self.nodes[beta.0].value.shape();
        if gs != [c] || bs != [c] || mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm params", &[c], gs));
        }
        let gd = self.nodes[gamma.0].value.data().to_vec();
        let bd = self.nodes[beta.0].value.data().to_vec();
        let invstd: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            for (ch, &v) in row.iter().enumerate() {
                data.push((v - mean[ch]) * invstd[ch] * gd[ch] + bd[ch]);
            }
        }
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                train,
            },
            req,
        ))
    }

    /// Reverse sweep from a scalar loss node. Returns per-leaf gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::invalid(
                "loss does not depend on any differentiable leaf",
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(gy) = (if matches!(node.op, Op::Leaf) {
                continue;
            } else {
                grads[i].take()
            }) else {
                continue;
            };
            self.backprop_node(node, &gy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Unary { kind, x } => {
                let xv = &self.nodes[x.0].value;
                let yv = &node.value;
                let data: Vec<f32> = match kind {
                    UnaryKind::Neg => gy.data().iter().map(|&g| -g).collect(),
                    UnaryKind::Exp => gy
                        .data()
                        .iter()
                        .zip(yv.data())
                        .map(|(&g, &y)| g * y)
                        .collect(),
                    UnaryKind::Log => gy
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&g, &v)| g / v)
                        .collect(),
                    UnaryKind::Relu => gy
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect(),
                    UnaryKind::Sigmoid => gy
                        .data()
                        .iter()
                        .zip(yv.data())
                        .map(|(&g, &y)| g * y * (1.0 - y))
                        .collect(),
                    UnaryKind::Tanh => gy
                        .data()
                        .iter()
                        .zip(yv.data())
                        .map(|(&g, &y)| g * (1.0 - y * y))
                        .collect(),
                    UnaryKind::Sign => vec![0.0; gy.len()],
                };
                self.acc(
                    grads,
                    *x,
                    Tensor {
                        shape: xv.shape().to_vec(),
                        data,
                    },
                );
            }
            Op::Clip { x, lo, hi } => {
                let xv = &self.nodes[x.0].value;
                let data = gy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &v)| if v > *lo && v < *hi { g } else { 0.0 })
                    .collect();
                self.acc(
                    grads,
                    *x,
                    Tensor {
                        shape: xv.shape().to_vec(),
                        data,
                    },
                );
            }
            Op::Binary { kind, a, b } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                match kind {
                    BinKind::Add => {
                        self.acc(grads, *a, gy.clone());
                        self.acc(grads, *b, gy.clone());
                    }
                    BinKind::Sub => {
                        self.acc(grads, *a, gy.clone());
                        self.acc(grads, *b, gy.map(|g| -g));
                    }
                    BinKind::Mul => {
                        self.acc(grads, *a, gy.zip(bv, |g, y| g * y).expect("shape"));
                        self.acc(grads, *b, gy.zip(av, |g, x| g * x).expect("shape"));
                    }
                    BinKind::Div => {
                        self.acc(grads, *a, gy.zip(bv, |g, y| g / y).expect("shape"));
                        let data = gy
                            .data()
                            .iter()
                            .zip(av.data().iter().zip(bv.data()))
                            .map(|(&g, (&x, &y))| -g * x / (y * y))
                            .collect();
                        self.acc(
                            grads,
                            *b,
                            Tensor {
                                shape: bv.shape().to_vec(),
                                data,
                            },
                        );
                    }
                }
            }
            Op::AddScalar { x } => self.acc(grads, *x, gy.clone()),
            Op::MulScalar { x, s } => self.acc(grads, *x, gy.map(|g| g * s)),
            Op::RsubScalar { x } => self.acc(grads, *x, gy.map(|g| -g)),
            Op::AddRowVec { x, b } => {
                self.acc(grads, *x, gy.clone());
                if self.nodes[b.0].requires_grad {
                    let n = *self.nodes[b.0].value.shape().last().expect("rank >= 1");
                    let mut db = vec![0.0f32; n];
                    for row in gy.data().chunks(n) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.acc(
                        grads,
                        *b,
                        Tensor {
                            shape: vec![n],
                            data: db,
                        },
                    );
                }
            }
            Op::Matmul { a, b } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let da = linalg::mm_nt(gy.data(), bv.data(), m, n, k);
                    self.acc(
                        grads,
                        *a,
                        Tensor {
                            shape: vec![m, k],
                            data: da,
                        },
                    );
                }
                if self.nodes[b.0].requires_grad {
                    let db = linalg::mm_tn(av.data(), gy.data(), m, k, n);
                    self.acc(
                        grads,
                        *b,
                        Tensor {
                            shape: vec![k, n],
                            data: db,
                        },
                    );
                }
            }
            Op::Conv2d { x, w, b, g } => {
                if self.nodes[x.0].requires_grad {
                    let dx = linalg::conv_backward_data(gy.data(), self.nodes[w.0].value.data(), g);
                    self.acc(
                        grads,
                        *x,
                        Tensor {
                            shape: self.nodes[x.0].value.shape().to_vec(),
                            data: dx,
                        },
                    );
                }
                let need_w = self.nodes[w.0].requires_grad;
                let need_b = b.map(|b| self.nodes[b.0].requires_grad).unwrap_or(false);
                if need_w || need_b {
                    let (dw, db) =
                        linalg::conv_backward_weights(self.nodes[x.0].value.data(), gy.data(), g);
                    if need_w {
                        self.acc(
                            grads,
                            *w,
                            Tensor {
                                shape: self.nodes[w.0].value.shape().to_vec(),
                                data: dw,
                            },
                        );
                    }
                    if need_b {
                        self.acc(
                            grads,
                            b.expect("need_b"),
                            Tensor {
                                shape: vec![g.c_out],
                                data: db,
                            },
                        );
                    }
                }
            }
            Op::TConv2d { x, w, b, g } => {
                // Forward was conv_backward_data, so the adjoints swap roles.
                if self.nodes[x.0].requires_grad {
                    let dx = linalg::conv_forward(gy.data(), self.nodes[w.0].value.data(), None, g);
                    self.acc(
                        grads,
                        *x,
                        Tensor {
                            shape: self.nodes[x.0].value.shape().to_vec(),
                            data: dx,
                        },
                    );
                }
                if self.nodes[w.0].requires_grad {
                    let (dw, _) =
                        linalg::conv_backward_weights(gy.data(), self.nodes[x.0].value.data(), g);
                    self.acc(
                        grads,
                        *w,
                        Tensor {
                            shape: self.nodes[w.0].value.shape().to_vec(),
                            data: dw,
                        },
                    );
                }
                if let Some(bv) = b {
                    if self.nodes[bv.0].requires_grad {
                        let c = g.c_in;
                        let mut db = vec![0.0f32; c];
                        for row in gy.data().chunks(c) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.acc(
                            grads,
                            *bv,
                            Tensor {
                                shape: vec![c],
                                data: db,
                            },
                        );
                    }
                }
            }
            Op::MaxPool2x2 { x, argmax } => {
                let xv = &self.nodes[x.0].value;
                let mut dx = vec![0.0f32; xv.len()];
                for (&src, &g) in argmax.iter().zip(gy.data()) {
                    dx[src as usize] += g;
                }
                self.acc(
                    grads,
                    *x,
                    Tensor {
                        shape: xv.shape().to_vec(),
                        data: dx,
                    },
                );
            }
            Op::Upsample2x { x } => {
                let xv = &self.nodes[x.0].value;
                let (n, h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let mut dx = vec![0.0f32; xv.len()];
                for img in 0..n {
                    for y in 0..2 * h {
                        for x_ in 0..2 * w {
                            let src = ((img * 2 * h + y) * 2 * w + x_) * c;
                            let dst = ((img * h + y / 2) * w + x_ / 2) * c;
                            for ch in 0..c {
                                dx[dst + ch] += gy.data()[src + ch];
                            }
                        }
                    }
                }
                self.acc(
                    grads,
                    *x,
                    Tensor {
                        shape: xv.shape().to_vec(),
                        data: dx,
                    },
                );
            }
            Op::Reshape { x } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                self.acc(
                    grads,
                    *x,
                    Tensor {
                        shape: xs,
                        data: gy.data().to_vec(),
                    },
                );
            }
            Op::SliceLastDim { x, start, len } => {
                let xv = &self.nodes[x.0].value;
                let n = *xv.shape().last().expect("rank >= 1");
                let rows = xv.len() / n;
                let mut dx = vec![0.0f32; xv.len()];
                for r in 0..rows {
                    dx[r * n + start..r * n + start + len]
                        .copy_from_slice(&gy.data()[r * len..(r + 1) * len]);
                }
                self.acc(
                    grads,
                    *x,
                    Tensor {
                        shape: xv.shape().to_vec(),
                        data: dx,
                    },
                );
            }
            Op::SumAll { x } => {
                let g = gy.data()[0];
                let xv = &self.nodes[x.0].value;
                self.acc(grads, *x, Tensor::full(xv.shape(), g));
            }
            Op::MeanAll { x } => {
                let xv = &self.nodes[x.0].value;
                let g = gy.data()[0] / xv.len() as f32;
                self.acc(grads, *x, Tensor::full(xv.shape(), g));
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let g = gy.data()[0] / labels.len() as f32;
                let classes = probs.len() / labels.len();
                let mut dl = probs.iter().map(|&p| p * g).collect::<Vec<f32>>();
                for (i, &y) in labels.iter().enumerate() {
                    dl[i * classes + y] -= g;
                }
                self.acc(
                    grads,
                    *logits,
                    Tensor {
                        shape: self.nodes[logits.0].value.shape().to_vec(),
                        data: dl,
                    },
                );
            }
            Op::Dropout { x, mask } => {
                let data = gy
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&g, &m)| g * m)
                    .collect();
                self.acc(
                    grads,
                    *x,
                    Tensor {
                        shape: self.nodes[x.0].value.shape().to_vec(),
                        data,
                    },
                );
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                train,
            } => {
                let xv = &self.nodes[x.0].value;
                let c = xv.shape()[3];
                let m = xv.len() / c;
                let gd = self.nodes[gamma.0].value.data();
                let invstd: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

                let mut dbeta = vec![0.0f64; c];
                let mut dgamma = vec![0.0f64; c];
                for (row, grow) in xv.data().chunks(c).zip(gy.data().chunks(c)) {
                    for ch in 0..c {
                        let xhat = (row[ch] - mean[ch]) * invstd[ch];
                        dbeta[ch] += grow[ch] as f64;
                        dgamma[ch] += (grow[ch] * xhat) as f64;
                    }
                }

                if self.nodes[x.0].requires_grad {
                    let mut dx = Vec::with_capacity(xv.len());
                    if *train {
                        for (row, grow) in xv.data().chunks(c).zip(gy.data().chunks(c)) {
                            for ch in 0..c {
                                let xhat = (row[ch] - mean[ch]) * invstd[ch];
                                let term = grow[ch] as f64
                                    - dbeta[ch] / m as f64
                                    - xhat as f64 * dgamma[ch] / m as f64;
                                dx.push((gd[ch] * invstd[ch]) * term as f32);
                            }
                        }
                    } else {
                        for grow in gy.data().chunks(c) {
                            for ch in 0..c {
                                dx.push(grow[ch] * gd[ch] * invstd[ch]);
                            }
                        }
                    }
                    self.acc(
                        grads,
                        *x,
                        Tensor {
                            shape: xv.shape().to_vec(),
                            data: dx,
                        },
                    );
                }
                if self.nodes[gamma.0].requires_grad {
                    self.acc(
                        grads,
                        *gamma,
                        Tensor {
                            shape: vec![c],
                            data: dgamma.iter().map(|&v| v as f32).collect(),
                        },
                    );
                }
                if self.nodes[beta.0].requires_grad {
                    self.acc(
                        grads,
                        *beta,
                        Tensor {
                            shape: vec![c],
                            data: dbeta.iter().map(|&v| v as f32).collect(),
                        },
                    );
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_chain() {
        // d/dx of (x * x + 3x) at x = 2 is 2x + 3 = 7.
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0), true);
        let sq = t.mul(x, x).unwrap();
        let lin = t.mul_scalar(x, 3.0);
        let y = t.add(sq, lin).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data()[0], 7.0);
    }

    #[test]
    fn softmax_xent_gradient_is_probs_minus_onehot() {
        let mut t = Tape::new();
        let logits = t.leaf(
            Tensor::new(vec![1, 3], vec![1.0, 2.0, 0.5]).unwrap(),
            true,
        );
        let loss = t.softmax_cross_entropy(logits, &[1]).unwrap();
        let g = t.backward(loss).unwrap();
        let gl = g.get(logits).unwrap().data();
        // softmax of [1, 2, 0.5]
        let exps: Vec<f64> = [1.0f64, 2.0, 0.5].iter().map(|v| v.exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, &e) in exps.iter().enumerate() {
            let want = e / z - if j == 1 { 1.0 } else { 0.0 };
            assert!((gl[j] as f64 - want).abs() < 1e-6, "class {j}");
        }
    }

    #[test]
    fn maxpool_ties_pick_first_in_scan_order() {
        let mut t = Tape::new();
        // 2x2 single-channel block of equal values.
        let x = t.leaf(Tensor::new(vec![1, 2, 2, 1], vec![5.0; 4]).unwrap(), true);
        let y = t.maxpool2x2(x).unwrap();
        assert_eq!(t.value(y).data(), &[5.0]);
        let s = t.sum_all(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn sign_has_zero_gradient_and_sign_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![-2.0, 0.0, 3.0]), true);
        let s = t.sign(x);
        assert_eq!(t.value(s).data(), &[-1.0, 0.0, 1.0]);
        let sum = t.sum_all(s);
        let g = t.backward(sum).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn clip_gradient_zero_outside_open_interval() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![-0.5, 0.0, 0.5, 1.0, 1.5]), true);
        let c = t.clip(x, 0.0, 1.0).unwrap();
        let s = t.sum_all(c);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_keeps_expectation() {
        let mut t = Tape::new();
        let n = 20_000;
        let x = t.leaf(Tensor::full(&[n], 1.0), false);
        let mut rng = Rng::new(123);
        let d = t.dropout(x, 0.25, &mut rng).unwrap();
        let mean = t.value(d).mean_f64();
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        // Survivors carry the inverse keep rate.
        assert!(t
            .value(d)
            .data()
            .iter()
            .all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-6));
    }

    #[test]
    fn backward_requires_scalar_and_grad_path() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        assert!(t.backward(x).is_err());
        let c = t.constant(Tensor::scalar(1.0));
        assert!(t.backward(c).is_err());
    }

    #[test]
    fn upsample_then_pool_is_identity_for_distinct_values() {
        let mut t = Tape::new();
        let x = t.leaf(
            Tensor::new(vec![1, 2, 2, 1], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            false,
        );
        let up = t.upsample2x(x).unwrap();
        assert_eq!(t.value(up).shape(), &[1, 4, 4, 1]);
        let down = t.maxpool2x2(up).unwrap();
        assert_eq!(t.value(down).data(), t.value(x).data());
    }
}
