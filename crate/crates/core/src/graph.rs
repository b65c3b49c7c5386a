//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably for the duration of one
//! forward/backward pass. Every op appends a node holding its output value;
//! [`Graph::backward`] walks the tape in reverse from seed gradients.
//! Batch-norm running statistics are not written during the pass; they are
//! collected and handed back by [`Graph::into_buffer_updates`].

use std::borrow::Cow;
use std::collections::HashMap;

use crate::kernels::{self, ConvGeom};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{resize_bilinear, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    /// `[N,1,H,W]` plane broadcast over the channels of `x`.
    MulPlane { plane: Var, x: Var },
    Relu(Var),
    Sigmoid(Var),
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Resize { x: Var, in_h: usize, in_w: usize },
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    Softmax(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, invstd: Vec<f64>, batch_stats: bool },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, geom: ConvGeom },
    ChannelScale { x: Var, scale: Vec<f64> },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Momentum and epsilon of a batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_vars: HashMap<ParamId, Var>,
    training: bool,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

impl<'p> Graph<'p> {
    /// `training` selects batch statistics (and running-stat updates) in batch norm.
    pub fn new(store: &'p ParamStore, training: bool) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            training,
            buffer_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Constant input; gradients are still reported for it when seeded downstream.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Input that should receive a gradient (used by gradient probes).
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(Cow::Borrowed(self.store.get(id)), Op::Leaf, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push_op(out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push_op(out, Op::Mul(a, b), &[a, b])
    }

    pub fn mul_plane(&mut self, plane: Var, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(plane).dims4(), (n, 1, h, w), "mul_plane shape mismatch");
        let mut out = self.value(x).clone();
        let pl = self.value(plane).data();
        for b in 0..n {
            let g = &pl[b * h * w..(b + 1) * h * w];
            for ci in 0..c {
                let o = &mut out.data_mut()[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                for (v, &gv) in o.iter_mut().zip(g) {
                    *v *= gv;
                }
            }
        }
        self.push_op(out, Op::MulPlane { plane, x }, &[plane, x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push_op(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push_op(out, Op::Sigmoid(x), &[x])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push_op(out, Op::Conv { x, w, b, geom }, &parents)
    }

    /// Bilinear resize; a no-op when the size already matches.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (_, _, h, w) = self.value(x).dims4();
        if (h, w) == (out_h, out_w) {
            return x;
        }
        let out = resize_bilinear(self.value(x), out_h, out_w);
        self.push_op(out, Op::Resize { x, in_h: h, in_w: w }, &[x])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let chans: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pn, pc, ph, pw) = self.value(p).dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "concat shape mismatch");
                pc
            })
            .collect();
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, total, h, w]);
        for b in 0..n {
            let mut off = 0;
            for (&p, &c) in parts.iter().zip(&chans) {
                let src = &self.value(p).data()[b * c * hw..(b + 1) * c * hw];
                out.data_mut()[(b * total + off) * hw..(b * total + off + c) * hw].copy_from_slice(src);
                off += c;
            }
        }
        self.push_op(out, Op::Concat(parts.to_vec()), parts)
    }

    /// Channels `start..start+len`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(start + len <= c, "narrow out of range");
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, len, h, w]);
        for b in 0..n {
            let src = &self.value(x).data()[(b * c + start) * hw..(b * c + start + len) * hw];
            out.data_mut()[b * len * hw..(b + 1) * len * hw].copy_from_slice(src);
        }
        self.push_op(out, Op::Narrow { x, start }, &[x])
    }

    /// Softmax across the channel axis at every pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for b in 0..n {
            for i in 0..hw {
                let at = |ci: usize| (b * c + ci) * hw + i;
                let m = (0..c).map(|ci| d[at(ci)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for ci in 0..c {
                    let e = (d[at(ci)] - m).exp();
                    d[at(ci)] = e;
                    z += e;
                }
                for ci in 0..c {
                    d[at(ci)] /= z;
                }
            }
        }
        self.push_op(out, Op::Softmax(x), &[x])
    }

    pub fn batch_norm(&mut self, x: Var, p: &NormParams) -> Var {
        let gamma = self.param(p.gamma);
        let beta = self.param(p.beta);
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let m = (n * hw) as f64;
        let xv = self.value(x);
        let (mean, var) = if self.training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += xv.data()[(b * c + ci) * hw..(b * c + ci + 1) * hw].iter().sum::<f64>();
                }
                mean[ci] = s / m;
                let mut q = 0.0;
                for b in 0..n {
                    for v in &xv.data()[(b * c + ci) * hw..(b * c + ci + 1) * hw] {
                        q += (v - mean[ci]).powi(2);
                    }
                }
                var[ci] = q / m;
            }
            (mean, var)
        } else {
            (
                self.store.get(p.running_mean).data().to_vec(),
                self.store.get(p.running_var).data().to_vec(),
            )
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
        let mut xhat = xv.clone();
        for b in 0..n {
            for ci in 0..c {
                for v in &mut xhat.data_mut()[(b * c + ci) * hw..(b * c + ci + 1) * hw] {
                    *v = (*v - mean[ci]) * invstd[ci];
                }
            }
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = xhat.clone();
        for b in 0..n {
            for ci in 0..c {
                for v in &mut out.data_mut()[(b * c + ci) * hw..(b * c + ci + 1) * hw] {
                    *v = *v * g[ci] + bt[ci];
                }
            }
        }
        if self.training {
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let rm = self.store.get(p.running_mean);
            let rv = self.store.get(p.running_var);
            let new_mean = rm.zip_map(
                &Tensor::from_vec(&[c], mean).expect("mean"),
                |r, b| (1.0 - p.momentum) * r + p.momentum * b,
            );
            let new_var = rv.zip_map(
                &Tensor::from_vec(&[c], var).expect("var"),
                |r, b| (1.0 - p.momentum) * r + p.momentum * b * unbias,
            );
            self.buffer_updates.push((p.running_mean, new_mean));
            self.buffer_updates.push((p.running_var, new_var));
        }
        let batch_stats = self.training;
        self.push_op(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                batch_stats,
            },
            &[x, gamma, beta],
        )
    }

    pub fn max_pool(&mut self, x: Var, geom: ConvGeom) -> Var {
        let (out, argmax) = kernels::max_pool_forward(self.value(x), geom);
        self.push_op(out, Op::MaxPool { x, argmax }, &[x])
    }

    pub fn avg_pool(&mut self, x: Var, geom: ConvGeom) -> Var {
        let out = kernels::avg_pool_forward(self.value(x), geom);
        self.push_op(out, Op::AvgPool { x, geom }, &[x])
    }

    /// `x[:, c] * scale[c] + shift[c]` with constant coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(scale.len() == c && shift.len() == c, "channel_affine arity");
        let hw = h * w;
        let mut out = self.value(x).clone();
        for b in 0..n {
            for ci in 0..c {
                for v in &mut out.data_mut()[(b * c + ci) * hw..(b * c + ci + 1) * hw] {
                    *v = *v * scale[ci] + shift[ci];
                }
            }
        }
        self.push_op(
            out,
            Op::ChannelScale {
                x,
                scale: scale.to_vec(),
            },
            &[x],
        )
    }

    /// Running-statistic writes recorded by training-mode batch norm.
    pub fn into_buffer_updates(self) -> Vec<(ParamId, Tensor)> {
        self.buffer_updates
    }

    /// Reverse pass from `seeds` (d loss / d var). Seeds for the same var accumulate.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.shape(v), "seed gradient shape mismatch");
            accumulate(&mut grads, v, g);
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(gy);
                continue;
            }
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &p in [a, b] {
                    if self.needs(p) {
                        accumulate(grads, p, gy.clone());
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, gy.zip_map(self.value(*b), |g, v| g * v));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, gy.zip_map(self.value(*a), |g, v| g * v));
                }
            }
            Op::MulPlane { plane, x } => {
                let (n, c, h, w) = gy.dims4();
                let hw = h * w;
                let pv = self.value(*plane).data();
                let xv = self.value(*x).data();
                if self.needs(*x) {
                    let mut dx = gy.clone();
                    for b in 0..n {
                        for ci in 0..c {
                            let o = &mut dx.data_mut()[(b * c + ci) * hw..(b * c + ci + 1) * hw];
                            for (v, &p) in o.iter_mut().zip(&pv[b * hw..(b + 1) * hw]) {
                                *v *= p;
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.needs(*plane) {
                    let mut dp = Tensor::zeros(&[n, 1, h, w]);
                    for b in 0..n {
                        for ci in 0..c {
                            let off = (b * c + ci) * hw;
                            for j in 0..hw {
                                dp.data_mut()[b * hw + j] += gy.data()[off + j] * xv[off + j];
                            }
                        }
                    }
                    accumulate(grads, *plane, dp);
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    accumulate(grads, *x, gy.zip_map(y, |g, v| if v > 0.0 { g } else { 0.0 }));
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    accumulate(grads, *x, gy.zip_map(y, |g, s| g * s * (1.0 - s)));
                }
            }
            Op::Conv { x, w, b, geom } => {
                let need_dx = self.needs(*x);
                let cg = kernels::conv2d_backward(self.value(*x), self.value(*w), gy, *geom, need_dx);
                if need_dx {
                    accumulate(grads, *x, cg.dx);
                }
                if self.needs(*w) {
                    accumulate(grads, *w, cg.dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        accumulate(grads, *b, cg.db);
                    }
                }
            }
            Op::Resize { x, in_h, in_w } => {
                if self.needs(*x) {
                    accumulate(grads, *x, kernels::resize_bilinear_backward(gy, *in_h, *in_w));
                }
            }
            Op::Concat(parts) => {
                let (n, total, h, w) = gy.dims4();
                let hw = h * w;
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).dims4().1;
                    if self.needs(p) {
                        let mut dp = Tensor::zeros(&[n, c, h, w]);
                        for b in 0..n {
                            dp.data_mut()[b * c * hw..(b + 1) * c * hw]
                                .copy_from_slice(&gy.data()[(b * total + off) * hw..(b * total + off + c) * hw]);
                        }
                        accumulate(grads, p, dp);
                    }
                    off += c;
                }
            }
            Op::Narrow { x, start } => {
                if self.needs(*x) {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let len = gy.dims4().1;
                    let hw = h * w;
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    for b in 0..n {
                        dx.data_mut()[(b * c + start) * hw..(b * c + start + len) * hw]
                            .copy_from_slice(&gy.data()[b * len * hw..(b + 1) * len * hw]);
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Softmax(x) => {
                if self.needs(*x) {
                    let (n, c, h, w) = gy.dims4();
                    let hw = h * w;
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    for b in 0..n {
                        for j in 0..hw {
                            let at = |ci: usize| (b * c + ci) * hw + j;
                            let dot: f64 = (0..c).map(|ci| gy.data()[at(ci)] * y.data()[at(ci)]).sum();
                            for ci in 0..c {
                                dx.data_mut()[at(ci)] = y.data()[at(ci)] * (gy.data()[at(ci)] - dot);
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                batch_stats,
            } => {
                let (n, c, h, w) = gy.dims4();
                let hw = h * w;
                let m = (n * hw) as f64;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ci in 0..c {
                        let off = (b * c + ci) * hw;
                        for j in 0..hw {
                            dgamma[ci] += gy.data()[off + j] * xhat.data()[off + j];
                            dbeta[ci] += gy.data()[off + j];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    for b in 0..n {
                        for ci in 0..c {
                            let off = (b * c + ci) * hw;
                            for j in 0..hw {
                                let dy = gy.data()[off + j];
                                dx.data_mut()[off + j] = if *batch_stats {
                                    g[ci] * invstd[ci] / m
                                        * (m * dy - dbeta[ci] - xhat.data()[off + j] * dgamma[ci])
                                } else {
                                    g[ci] * invstd[ci] * dy
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma).expect("dgamma"));
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta).expect("dbeta"));
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    for (o, &src) in argmax.iter().enumerate() {
                        dx.data_mut()[src] += gy.data()[o];
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::AvgPool { x, geom } => {
                if self.needs(*x) {
                    accumulate(grads, *x, kernels::avg_pool_backward(self.value(*x).dims4(), gy, *geom));
                }
            }
            Op::ChannelScale { x, scale } => {
                if self.needs(*x) {
                    let (n, c, h, w) = gy.dims4();
                    let hw = h * w;
                    let mut dx = gy.clone();
                    for b in 0..n {
                        for ci in 0..c {
                            for v in &mut dx.data_mut()[(b * c + ci) * hw..(b * c + ci + 1) * hw] {
                                *v *= scale[ci];
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter touched by the pass, in registration order.
    pub fn params(&self, graph: &Graph<'_>) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = graph
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| self.grads[v.0].clone().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| id.index());
        out
    }
}
