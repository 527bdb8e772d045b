//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] borrows a [`ParamStore`], records every operation applied to its
//! [`Var`]s and, on [`Graph::backward`], walks the tape in reverse. Parameter
//! leaves are resolved by reference, so building a graph never copies weights.
//! Gradients are only propagated into nodes that transitively depend on a
//! trainable, unfrozen parameter or on an input created with
//! [`Graph::input_with_grad`].

mod conv;

use std::collections::{HashMap, HashSet};

pub(crate) use conv::{col2im, im2col, ConvGeom};

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Pending exponential-moving-average update of a buffer (batch-norm running stats).
#[derive(Clone, Debug)]
pub struct BufferUpdate {
    pub id: ParamId,
    pub batch_value: Vec<f64>,
    pub momentum: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

enum Op {
    Input,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        training: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Expand2d {
        x: Var,
        h: usize,
        w: usize,
    },
    Reshape(Var),
    Transpose12(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Fused {
        x: Var,
        grad: Tensor,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    no_grad: HashSet<ParamId>,
    training: bool,
    buffer_updates: Vec<BufferUpdate>,
}

/// Gradients produced by [`Graph::backward`] for parameters and grad-enabled inputs.
#[derive(Debug, Default)]
pub struct Grads {
    params: HashMap<ParamId, Tensor>,
    inputs: HashMap<Var, Tensor>,
}

impl Grads {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// `self += scale * other`, parameter-wise.
    pub fn axpy(&mut self, scale: f64, other: &Grads) {
        for (id, g) in &other.params {
            let entry = self.params.entry(*id).or_insert_with(|| Tensor::zeros(g.shape()));
            for (a, b) in entry.data_mut().iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }
}

fn softmax_row(row: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

impl<'s> Graph<'s> {
    /// A training-mode graph: batch norm uses batch statistics and records
    /// running-stat updates.
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            no_grad: HashSet::new(),
            training: true,
            buffer_updates: Vec::new(),
        }
    }

    pub fn inference(store: &'s ParamStore) -> Self {
        let mut g = Self::new(store);
        g.training = false;
        g
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Exclude parameters from differentiation in this graph only.
    pub fn disable_grad(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.no_grad.extend(ids);
    }

    pub fn take_buffer_updates(&mut self) -> Vec<BufferUpdate> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => self.store.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let ng = self.store.wants_grad(id) && !self.no_grad.contains(&id);
        let v = self.push(Tensor::empty(), Op::Param(id), ng);
        self.param_vars.insert(id, v);
        v
    }

    /// `x · w + b` over the last axis of `x`; `w` has shape `(in, out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let (fan_in, fan_out) = (self.shape(w)[0], self.shape(w)[1]);
        assert_eq!(
            *xs.last().unwrap(),
            fan_in,
            "linear: input {:?} vs weight in {}",
            xs,
            fan_in
        );
        let rows = self.value(x).numel() / fan_in;
        let mut out = vec![0.0; rows * fan_out];
        gemm(
            rows,
            fan_in,
            fan_out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            0.0,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in 0..rows {
                for (o, bv) in out[r * fan_out..(r + 1) * fan_out].iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = fan_out;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::new(&shape, out), Op::Linear { x, w, b }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, n) = (self.shape(b)[0], self.shape(b)[1]);
        assert_eq!(k, k2, "matmul inner dims");
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
        self.push(Tensor::new(&[m, n], out), Op::MatMul(a, b), ng)
    }

    /// Batched `a · b` (or `a · bᵀ`) over rank-3 tensors.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (bs, m, k) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
        let bsh = self.shape(b).to_vec();
        let n = if trans_b { bsh[1] } else { bsh[2] };
        let kb = if trans_b { bsh[2] } else { bsh[1] };
        assert!(bsh[0] == bs && kb == k, "bmm shapes {:?} x {:?}", self.shape(a), bsh);
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                false,
                &bd[i * k * n..],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&[bs, m, n], out), Op::BatchMatMul { a, b, trans_b }, ng)
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&shape, data), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x + b` where the shape of `b` equals a trailing suffix of the shape of `x`.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        assert!(
            bs.len() <= xs.len() && xs[xs.len() - bs.len()..] == bs[..],
            "add_broadcast {:?} + {:?}",
            xs,
            bs
        );
        let bd = self.value(b).data();
        let inner = bd.len();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % inner])
            .collect();
        let ng = self.needs(x) || self.needs(b);
        self.push(Tensor::new(&xs, data), Op::AddBroadcast(x, b), ng)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x).map(f);
        let ng = self.needs(x);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let d = *t.shape().last().unwrap();
        t.data_mut().chunks_mut(d).for_each(softmax_row);
        let ng = self.needs(x);
        self.push(t, Op::Softmax(x), ng)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        assert_eq!(self.value(gamma).numel(), d);
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mean) * rs;
            }
        }
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * gd[i % d] + bd[i % d])
            .collect();
        let shape = xv.shape().to_vec();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Tensor::new(&shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Batch normalization over `(B, C, H, W)` per channel.
    pub fn batch_norm2d(&mut self, x: Var, p: &BatchNormParams) -> Var {
        let gamma = self.param(p.gamma);
        let beta = self.param(p.beta);
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        let (bsz, c, hw) = (s[0], s[1], s[2] * s[3]);
        let count = (bsz * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if self.training {
            for b in 0..bsz {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    mean[ch] += xv.data()[base..base + hw].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for b in 0..bsz {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    var[ch] += xv.data()[base..base + hw]
                        .iter()
                        .map(|v| (v - mean[ch]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
        } else {
            mean.copy_from_slice(self.store.get(p.running_mean).data());
            var.copy_from_slice(self.store.get(p.running_var).data());
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.numel()];
        let mut out = vec![0.0; xv.numel()];
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        for b in 0..bsz {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let h = (xv.data()[i] - mean[ch]) * rstd[ch];
                    xhat[i] = h;
                    out[i] = h * gd[ch] + bd[ch];
                }
            }
        }
        if self.training {
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            self.buffer_updates.push(BufferUpdate {
                id: p.running_mean,
                batch_value: mean,
                momentum: p.momentum,
            });
            self.buffer_updates.push(BufferUpdate {
                id: p.running_var,
                batch_value: var.iter().map(|v| v * unbiased).collect(),
                momentum: p.momentum,
            });
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let training = self.training;
        self.push(
            Tensor::new(&s, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                training,
            },
            ng,
        )
    }

    /// 2-D convolution of `(B, C, H, W)` with weights `(O, C, kh, kw)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs[1], ws[1], "conv2d channels: input {:?} weight {:?}", xs, ws);
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], ws[3], stride, pad).expect("conv2d geometry");
        let (o, ck, npix) = (ws[0], geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; xs[0] * o * npix];
        let mut cols = vec![0.0; ck * npix];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let in_sz = xs[1] * xs[2] * xs[3];
        for bi in 0..xs[0] {
            im2col(&xd[bi * in_sz..(bi + 1) * in_sz], &geom, &mut cols);
            gemm(
                o,
                ck,
                npix,
                wd,
                false,
                &cols,
                false,
                &mut out[bi * o * npix..(bi + 1) * o * npix],
                0.0,
            );
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (i, chunk) in out.chunks_mut(npix).enumerate() {
                let bv = bd[i % o];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            Tensor::new(&[xs[0], o, geom.ho, geom.wo], out),
            Op::Conv2d { x, w, b, geom },
            ng,
        )
    }

    /// Transposed convolution of `(B, Cin, H, W)` with weights `(Cin, Cout, kh, kw)`;
    /// output side is `(H - 1)·stride - 2·pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs[1], ws[0], "conv_transpose2d channels");
        let (cin, cout, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let ho = (xs[2] - 1) * stride + kh - 2 * pad;
        let wo = (xs[3] - 1) * stride + kw - 2 * pad;
        let geom = ConvGeom::new(cout, ho, wo, kh, kw, stride, pad).expect("conv_transpose2d geometry");
        debug_assert_eq!((geom.ho, geom.wo), (xs[2], xs[3]));
        let (ck, npix) = (geom.col_rows(), geom.col_cols());
        let out_sz = cout * ho * wo;
        let mut out = vec![0.0; xs[0] * out_sz];
        let mut cols = vec![0.0; ck * npix];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        for bi in 0..xs[0] {
            gemm(ck, cin, npix, wd, true, &xd[bi * cin * npix..], false, &mut cols, 0.0);
            col2im(&cols, &geom, &mut out[bi * out_sz..(bi + 1) * out_sz]);
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (i, chunk) in out.chunks_mut(ho * wo).enumerate() {
                let bv = bd[i % cout];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            Tensor::new(&[xs[0], cout, ho, wo], out),
            Op::ConvTranspose2d { x, w, b, geom },
            ng,
        )
    }

    /// Non-overlapping max pooling with square window `k`.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (ho, wo) = (xs[2] / k, xs[3] / k);
        let planes = xs[0] * xs[1];
        let mut out = vec![0.0; planes * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        let xd = self.value(x).data();
        for p in 0..planes {
            let base = p * xs[2] * xs[3];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = base + (oy * k + dy) * xs[3] + ox * k + dx;
                            if xd[i] > best {
                                best = xd[i];
                                at = i;
                            }
                        }
                    }
                    let o = (p * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let ng = self.needs(x);
        self.push(
            Tensor::new(&[xs[0], xs[1], ho, wo], out),
            Op::MaxPool2d { x, argmax },
            ng,
        )
    }

    /// `(B, C, H, W) -> (B, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let hw = xs[2] * xs[3];
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let ng = self.needs(x);
        self.push(Tensor::new(&[xs[0], xs[1]], data), Op::GlobalAvgPool(x), ng)
    }

    /// `(B, C) -> (B, C, h, w)` by broadcasting each entry over a plane.
    pub fn expand2d(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, h * w))
            .collect();
        let ng = self.needs(x);
        self.push(Tensor::new(&[xs[0], xs[1], h, w], data), Op::Expand2d { x, h, w }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let ng = self.needs(x);
        self.push(t, Op::Reshape(x), ng)
    }

    /// Swap the last two axes of a rank-3 tensor.
    pub fn transpose12(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let out = transpose_batched(self.value(x).data(), xs[0], xs[1], xs[2]);
        let ng = self.needs(x);
        self.push(Tensor::new(&[xs[0], xs[2], xs[1]], out), Op::Transpose12(x), ng)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        let first = self.shape(inputs[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let mut shape = first.clone();
        shape[axis] = 0;
        let mut chunks = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            assert!(
                s.len() == first.len() && s[..axis] == first[..axis] && s[axis + 1..] == first[axis + 1..],
                "concat shape mismatch"
            );
            shape[axis] += s[axis];
            chunks.push(self.value(v).numel() / outer);
        }
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for (&v, &c) in inputs.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(v).data()[o * c..(o + 1) * c]);
            }
        }
        let ng = inputs.iter().any(|&v| self.needs(v));
        self.push(
            Tensor::new(&shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.numel() as f64;
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Normalize each row (last axis) to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(t.numel() / d);
        for row in out.data_mut().chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let ng = self.needs(x);
        self.push(out, Op::L2Normalize { x, norms }, ng)
    }

    /// Mean softmax cross-entropy of `(R, K)` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let t = self.value(logits);
        let k = t.shape()[1];
        assert_eq!(t.shape()[0], labels.len());
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(k).zip(labels) {
            assert!(y < k, "label {y} out of range for {k} logits");
            softmax_row(row);
            loss -= row[y].max(1e-300).ln();
        }
        loss /= labels.len() as f64;
        let ng = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Scalar node whose value and gradient with respect to `x` were computed
    /// externally (used for losses with closed-form gradients).
    pub fn fused_scalar(&mut self, x: Var, value: f64, grad: Tensor) -> Var {
        assert_eq!(grad.shape(), self.shape(x));
        let ng = self.needs(x);
        self.push(Tensor::scalar(value), Op::Fused { x, grad }, ng)
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let d = t.shape()[1];
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(t.row(i));
        }
        let ng = self.needs(table);
        self.push(
            Tensor::new(&[idx.len(), d], out),
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Grads::default();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {
                    out.inputs.insert(Var(i), g);
                }
                Op::Param(id) => {
                    out.params.insert(*id, g);
                }
                op => self.backprop_op(op, Var(i), &g, &mut grads),
            }
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop_op(&self, op: &Op, out: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::Linear { x, w, b } => {
                let (fan_in, fan_out) = (self.shape(*w)[0], self.shape(*w)[1]);
                let rows = gd.len() / fan_out;
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                self.acc_with(grads, *x, |dx| {
                    gemm(rows, fan_out, fan_in, gd, false, wd, true, dx, 1.0)
                });
                self.acc_with(grads, *w, |dw| {
                    gemm(fan_in, rows, fan_out, xd, true, gd, false, dw, 1.0)
                });
                if let Some(b) = b {
                    self.acc_with(grads, *b, |db| {
                        for r in gd.chunks(fan_out) {
                            for (d, v) in db.iter_mut().zip(r) {
                                *d += v;
                            }
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.acc_with(grads, *a, |da| gemm(m, n, k, gd, false, bd, true, da, 1.0));
                self.acc_with(grads, *b, |db| gemm(k, m, n, ad, true, gd, false, db, 1.0));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (bs, m, k) = (self.shape(*a)[0], self.shape(*a)[1], self.shape(*a)[2]);
                let n = self.shape(out)[2];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.acc_with(grads, *a, |da| {
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..],
                            false,
                            &bd[i * k * n..],
                            !trans_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            1.0,
                        );
                    }
                });
                self.acc_with(grads, *b, |db| {
                    for i in 0..bs {
                        let dst = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, &gd[i * m * n..], true, &ad[i * m * k..], false, dst, 1.0);
                        } else {
                            gemm(k, m, n, &ad[i * m * k..], true, &gd[i * m * n..], false, dst, 1.0);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.acc_with(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += gd[i] * bd[i];
                    }
                });
                self.acc_with(grads, *b, |db| {
                    for i in 0..db.len() {
                        db[i] += gd[i] * ad[i];
                    }
                });
            }
            Op::AddBroadcast(x, b) => {
                self.acc(grads, *x, g.clone());
                self.acc_with(grads, *b, |db| {
                    let inner = db.len();
                    for (i, v) in gd.iter().enumerate() {
                        db[i % inner] += v;
                    }
                });
            }
            Op::Scale(x, s) => self.acc(grads, *x, g.map(|v| v * s)),
            Op::Relu(x) => {
                let y = self.value(out).data();
                self.acc_with(grads, *x, |dx| {
                    for i in 0..dx.len() {
                        if y[i] > 0.0 {
                            dx[i] += gd[i];
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                self.acc_with(grads, *x, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += if xv[i] > 0.0 { gd[i] } else { slope * gd[i] };
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = self.value(out).data();
                self.acc_with(grads, *x, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += gd[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = self.value(out).data();
                let d = *self.shape(out).last().unwrap();
                self.acc_with(grads, *x, |dx| {
                    for r in 0..y.len() / d {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &gd[r * d..(r + 1) * d]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                self.acc_with(grads, *gamma, |dg| {
                    for (i, v) in gd.iter().enumerate() {
                        dg[i % d] += v * xhat[i];
                    }
                });
                self.acc_with(grads, *beta, |db| {
                    for (i, v) in gd.iter().enumerate() {
                        db[i % d] += v;
                    }
                });
                self.acc_with(grads, *x, |dx| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let base = r * d;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dxh = gd[base + j] * gam[j];
                            s1 += dxh;
                            s2 += dxh * xhat[base + j];
                        }
                        for j in 0..d {
                            let dxh = gd[base + j] * gam[j];
                            dx[base + j] += rs / d as f64 * (d as f64 * dxh - s1 - xhat[base + j] * s2);
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                training,
            } => {
                let s = self.shape(*x);
                let (bsz, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..bsz {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                let count = (bsz * hw) as f64;
                self.acc_with(grads, *x, |dx| {
                    for b in 0..bsz {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for i in base..base + hw {
                                dx[i] += if *training {
                                    gam[ch] * rstd[ch] / count * (count * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    gd[i] * gam[ch] * rstd[ch]
                                };
                            }
                        }
                    }
                });
                self.acc(grads, *gamma, Tensor::new(&[c], dgamma));
                self.acc(grads, *beta, Tensor::new(&[c], dbeta));
            }
            Op::Conv2d { x, w, b, geom } => {
                let xs = self.shape(*x);
                let o = self.shape(*w)[0];
                let (ck, npix) = (geom.col_rows(), geom.col_cols());
                let in_sz = xs[1] * xs[2] * xs[3];
                let bsz = xs[0];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let mut cols = vec![0.0; ck * npix];
                if self.needs(*w) {
                    self.acc_with(grads, *w, |dw| {
                        for bi in 0..bsz {
                            im2col(&xd[bi * in_sz..(bi + 1) * in_sz], geom, &mut cols);
                            gemm(o, npix, ck, &gd[bi * o * npix..], false, &cols, true, dw, 1.0);
                        }
                    });
                }
                self.acc_with(grads, *x, |dx| {
                    for bi in 0..bsz {
                        gemm(ck, o, npix, wd, true, &gd[bi * o * npix..], false, &mut cols, 0.0);
                        col2im(&cols, geom, &mut dx[bi * in_sz..(bi + 1) * in_sz]);
                    }
                });
                if let Some(b) = b {
                    self.acc_with(grads, *b, |db| {
                        for (i, chunk) in gd.chunks(npix).enumerate() {
                            db[i % o] += chunk.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let xs = self.shape(*x);
                let (cin, cout) = (self.shape(*w)[0], self.shape(*w)[1]);
                let (ck, npix) = (geom.col_rows(), geom.col_cols());
                let out_sz = cout * geom.h * geom.w;
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let bsz = xs[0];
                let mut dcols = vec![0.0; bsz * ck * npix];
                for bi in 0..bsz {
                    im2col(
                        &gd[bi * out_sz..(bi + 1) * out_sz],
                        geom,
                        &mut dcols[bi * ck * npix..(bi + 1) * ck * npix],
                    );
                }
                self.acc_with(grads, *x, |dx| {
                    for bi in 0..bsz {
                        gemm(
                            cin,
                            ck,
                            npix,
                            wd,
                            false,
                            &dcols[bi * ck * npix..],
                            false,
                            &mut dx[bi * cin * npix..(bi + 1) * cin * npix],
                            1.0,
                        );
                    }
                });
                self.acc_with(grads, *w, |dw| {
                    for bi in 0..bsz {
                        gemm(
                            cin,
                            npix,
                            ck,
                            &xd[bi * cin * npix..],
                            false,
                            &dcols[bi * ck * npix..],
                            true,
                            dw,
                            1.0,
                        );
                    }
                });
                if let Some(b) = b {
                    let plane = geom.h * geom.w;
                    self.acc_with(grads, *b, |db| {
                        for (i, chunk) in gd.chunks(plane).enumerate() {
                            db[i % cout] += chunk.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::MaxPool2d { x, argmax } => {
                self.acc_with(grads, *x, |dx| {
                    for (o, &i) in argmax.iter().enumerate() {
                        dx[i] += gd[o];
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                self.acc_with(grads, *x, |dx| {
                    for (p, chunk) in dx.chunks_mut(hw).enumerate() {
                        let v = gd[p] / hw as f64;
                        chunk.iter_mut().for_each(|d| *d += v);
                    }
                });
            }
            Op::Expand2d { x, h, w } => {
                self.acc_with(grads, *x, |dx| {
                    for (p, chunk) in gd.chunks(h * w).enumerate() {
                        dx[p] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, g.clone().reshape(&shape));
            }
            Op::Transpose12(x) => {
                let s = self.shape(out);
                let back = transpose_batched(gd, s[0], s[1], s[2]);
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, Tensor::new(&shape, back));
            }
            Op::Concat { inputs, axis } => {
                let shape = self.shape(out);
                let outer: usize = shape[..*axis].iter().product();
                let total = gd.len() / outer;
                let mut offset = 0;
                for &v in inputs {
                    let c = self.value(v).numel() / outer;
                    self.acc_with(grads, v, |dv| {
                        for o in 0..outer {
                            for j in 0..c {
                                dv[o * c + j] += gd[o * total + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.acc_with(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += s));
            }
            Op::Mean(x) => {
                let s = gd[0] / self.value(*x).numel() as f64;
                self.acc_with(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += s));
            }
            Op::L2Normalize { x, norms } => {
                let y = self.value(out).data();
                let d = y.len() / norms.len();
                self.acc_with(grads, *x, |dx| {
                    for (r, n) in norms.iter().enumerate() {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &gd[r * d..(r + 1) * d]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let s = gd[0] / labels.len() as f64;
                self.acc_with(grads, *logits, |dl| {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            dl[r * k + j] += s * (probs[r * k + j] - onehot);
                        }
                    }
                });
            }
            Op::Fused { x, grad } => {
                let s = gd[0];
                self.acc_with(grads, *x, |dx| {
                    for (d, v) in dx.iter_mut().zip(grad.data()) {
                        *d += s * v;
                    }
                });
            }
            Op::GatherRows { table, idx } => {
                let d = self.shape(*table)[1];
                self.acc_with(grads, *table, |dt| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += gd[r * d + j];
                        }
                    }
                });
            }
        }
    }
}

fn transpose_batched(x: &[f64], b: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        let src = &x[bi * m * n..(bi + 1) * m * n];
        let dst = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}
