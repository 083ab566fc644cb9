//! A small tape-based reverse-mode engine over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into each node's
//! gradient buffer. Parameters enter the tape as leaves through
//! [`ParamStore::bind`] and their gradients are pulled back with
//! [`ParamStore::pull_grads`].

mod gradcheck;
mod kernels;
mod params;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{sgd_step, BoundParam, BoundParams, ConvParams, DenseParams, Param, ParamStore, Sgd};

use crate::error::{shape_err, Error, Result};
use crate::roi::{pool_region, FeatureRegion};
use crate::tensor::{Shape, Tensor};
use kernels::ConvGeom;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    Add,
    Mul,
    /// Elementwise maximum; ties send the gradient to the first operand.
    Max,
    /// Channel concatenation.
    Concat,
}

/// Backward rule of a user-supplied op: given the input values and the output
/// gradient, returns one gradient buffer per input.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &[f64]) -> Vec<Vec<f64>>>;

/// Per-row regression target for [`Graph::smooth_l1`]: the class whose four
/// offsets are selected, and the target offsets.
pub type RegressionTarget = Option<(usize, [f64; 4])>;

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Pointwise(Var, Pointwise),
    Combine(Var, Var, Combine),
    Scale(Var, f64),
    SliceChannels { x: Var, start: usize },
    RoiPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Dense { x: Var, w: Var, b: Var },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64>, scale: f64 },
    SmoothL1 { pred: Var, targets: Vec<RegressionTarget>, scale: f64 },
    WeightedSum { x: Var, weights: Vec<f64> },
    Custom { inputs: Vec<Var>, backward: CustomBackward },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // keep the open interval even where exp saturates
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() <= 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.grad()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        if xs.c != ws.c {
            return shape_err(format!("conv expects {} input channels, got {}", ws.c, xs.c));
        }
        if ws.h != ws.w {
            return shape_err(format!("conv kernel must be square, got {ws}"));
        }
        if bs.numel() != ws.n {
            return shape_err(format!("conv bias has {} entries for {} outputs", bs.numel(), ws.n));
        }
        if stride == 0 {
            return shape_err("conv stride must be at least 1");
        }
        if xs.h + 2 * pad < ws.h || xs.w + 2 * pad < ws.w {
            return shape_err(format!("kernel {ws} larger than padded input {xs}"));
        }
        let geom = ConvGeom { input: xs, out_c: ws.n, k: ws.h, stride, pad };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::from_vec(geom.out_shape(), out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }))
    }

    /// Stride-1 convolution that keeps the spatial size (odd kernels only).
    pub fn conv2d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let k = self.shape(w).h;
        if k % 2 == 0 {
            return shape_err(format!("same-size conv needs an odd kernel, got {k}"));
        }
        self.conv2d(x, w, b, 1, (k - 1) / 2)
    }

    pub fn pointwise(&mut self, x: Var, kind: Pointwise) -> Var {
        let value = match kind {
            Pointwise::Relu => self.value(x).map(|v| if v > 0.0 { v } else { 0.0 }),
            Pointwise::Sigmoid => self.value(x).map(sigmoid),
        };
        self.push(value, Op::Pointwise(x, kind))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.pointwise(x, Pointwise::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.pointwise(x, Pointwise::Sigmoid)
    }

    pub fn combine(&mut self, a: Var, b: Var, kind: Combine) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let value = if kind == Combine::Concat {
            if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
                return shape_err(format!("cannot concat {sa} and {sb}"));
            }
            let out = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            let mut data = Vec::with_capacity(out.numel());
            for n in 0..sa.n {
                data.extend_from_slice(&va[n * sa.item_len()..(n + 1) * sa.item_len()]);
                data.extend_from_slice(&vb[n * sb.item_len()..(n + 1) * sb.item_len()]);
            }
            Tensor::from_vec(out, data)?
        } else {
            if sa != sb {
                return shape_err(format!("elementwise op on {sa} and {sb}"));
            }
            let f: fn(f64, f64) -> f64 = match kind {
                Combine::Add => |p, q| p + q,
                Combine::Mul => |p, q| p * q,
                _ => |p, q| if p >= q { p } else { q },
            };
            let data = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&p, &q)| f(p, q))
                .collect();
            Tensor::from_vec(sa, data)?
        };
        Ok(self.push(value, Op::Combine(a, b, kind)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.combine(a, b, Combine::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.combine(a, b, Combine::Mul)
    }

    pub fn emax(&mut self, a: Var, b: Var) -> Result<Var> {
        self.combine(a, b, Combine::Max)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.combine(a, b, Combine::Concat)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s))
    }

    /// Channels `start..start + len` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s.c || len == 0 {
            return shape_err(format!("channel slice {start}..{} of {s}", start + len));
        }
        let out = Shape::new(s.n, len, s.h, s.w);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(out.numel());
        for n in 0..s.n {
            let base = n * s.item_len() + start * s.plane();
            data.extend_from_slice(&src[base..base + len * s.plane()]);
        }
        let value = Tensor::from_vec(out, data)?;
        Ok(self.push(value, Op::SliceChannels { x, start }))
    }

    /// Pools each `(batch item, region)` pair into one output row of shape
    /// `(rois.len(), c, out_h, out_w)`.
    pub fn roi_pool(
        &mut self,
        x: Var,
        rois: &[(usize, FeatureRegion)],
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let s = self.shape(x);
        if rois.is_empty() {
            return shape_err("roi pooling needs at least one region");
        }
        let mut data = Vec::with_capacity(rois.len() * s.c * out_h * out_w);
        let mut argmax = Vec::with_capacity(data.capacity());
        for (item, region) in rois {
            if *item >= s.n {
                return Err(Error::Index(format!("roi batch index {item} >= {}", s.n)));
            }
            let (v, a) = pool_region(self.value(x).data(), s, *item, region, out_h, out_w)?;
            data.extend(v);
            argmax.extend(a);
        }
        let value = Tensor::from_vec(Shape::new(rois.len(), s.c, out_h, out_w), data)?;
        Ok(self.push(value, Op::RoiPool { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let plane = s.plane() as f64;
        let data = self
            .value(x)
            .data()
            .chunks_exact(s.plane())
            .map(|p| p.iter().sum::<f64>() / plane)
            .collect();
        let value = Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("pool shape");
        self.push(value, Op::GlobalAvgPool(x))
    }

    /// Fully connected layer on the flattened items of `x`; `w` is
    /// `(out, in, 1, 1)` and `b` has `out` entries.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.item_len() != ws.item_len() || bs.numel() != ws.n {
            return shape_err(format!("dense {ws} (bias {bs}) applied to {xs}"));
        }
        let data = kernels::dense_forward(
            self.value(x).data(),
            xs.n,
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::from_vec(Shape::new(xs.n, ws.n, 1, 1), data)?;
        Ok(self.push(value, Op::Dense { x, w, b }))
    }

    /// `scale * sum_n -log softmax(logits[n])[labels[n]]`, as a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], scale: f64) -> Result<Var> {
        let s = self.shape(logits);
        let k = s.item_len();
        if labels.len() != s.n {
            return shape_err(format!("{} labels for {} rows", labels.len(), s.n));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Index(format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax_rows(self.value(logits).data(), k);
        let loss: f64 = labels
            .iter()
            .enumerate()
            .map(|(n, &y)| {
                let row = &self.value(logits).data()[n * k..(n + 1) * k];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[y]
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(scale * loss),
            Op::SoftmaxCe { logits, labels: labels.to_vec(), probs, scale },
        ))
    }

    /// `scale * sum_n sum_i smooth_l1(v_i - pred[n, 4 (class - 1) + i])` over
    /// rows with a target.
    pub fn smooth_l1(&mut self, pred: Var, targets: &[RegressionTarget], scale: f64) -> Result<Var> {
        let s = self.shape(pred);
        let width = s.item_len();
        if targets.len() != s.n {
            return shape_err(format!("{} regression targets for {} rows", targets.len(), s.n));
        }
        let p = self.value(pred).data();
        let mut total = 0.0;
        for (n, t) in targets.iter().enumerate() {
            if let Some((class, v)) = t {
                if *class == 0 || 4 * class > width {
                    return Err(Error::Index(format!("regression class {class} for width {width}")));
                }
                let base = n * width + 4 * (class - 1);
                for i in 0..4 {
                    total += smooth_l1(v[i] - p[base + i]).0;
                }
            }
        }
        Ok(self.push(
            Tensor::scalar(scale * total),
            Op::SmoothL1 { pred, targets: targets.to_vec(), scale },
        ))
    }

    /// `sum_k weights[k] * x[k]`, a scalar projection.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return shape_err("projection length mismatch");
        }
        let v = self.value(x).data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(v), Op::WeightedSum { x, weights }))
    }

    /// Appends a node with a caller-computed value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        self.push(value, Op::Custom { inputs: inputs.to_vec(), backward })
    }

    /// Fingerprint of every discrete branch taken in the forward pass (relu
    /// masks, max selections, pooling argmax). Two evaluations with equal
    /// fingerprints lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Pointwise(x, Pointwise::Relu) => {
                    i.hash(&mut h);
                    for v in self.nodes[x.0].value.data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::Combine(a, b, Combine::Max) => {
                    i.hash(&mut h);
                    let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    for (p, q) in va.iter().zip(vb) {
                        (p >= q).hash(&mut h);
                    }
                }
                Op::RoiPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::SmoothL1 { pred, targets, .. } => {
                    i.hash(&mut h);
                    let p = self.nodes[pred.0].value.data();
                    let width = self.nodes[pred.0].value.shape().item_len();
                    for (n, t) in targets.iter().enumerate() {
                        if let Some((c, v)) = t {
                            for k in 0..4 {
                                let d = v[k] - p[n * width + 4 * (c - 1) + k];
                                (d.abs() <= 1.0, d > 0.0).hash(&mut h);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Zeroes every gradient on the tape.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Back-propagates from a scalar node with seed gradient 1.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).len() != 1 {
            return shape_err(format!("backward needs a scalar, got {}", self.shape(out)));
        }
        self.backward_with(out, &[1.0])
    }

    /// Back-propagates an arbitrary output gradient.
    pub fn backward_with(&mut self, out: Var, seed: &[f64]) -> Result<()> {
        if seed.len() != self.value(out).len() {
            return shape_err("seed gradient length mismatch");
        }
        for (g, s) in self.nodes[out.0].value.grad_mut().iter_mut().zip(seed) {
            *g += s;
        }
        for i in (0..=out.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if node.value.grad().iter().all(|&g| g == 0.0) {
                continue;
            }
            backprop_node(before, node);
        }
        Ok(())
    }
}

fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    out
}

fn accumulate(nodes: &mut [Node], v: Var, contrib: &[f64]) {
    for (g, c) in nodes[v.0].value.grad_mut().iter_mut().zip(contrib) {
        *g += c;
    }
}

fn backprop_node(before: &mut [Node], node: &mut Node) {
    let g = node.value.grad().to_vec();
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, geom } => {
            let mut dx = vec![0.0; before[x.0].value.len()];
            let mut dw = vec![0.0; before[w.0].value.len()];
            let mut db = vec![0.0; before[b.0].value.len()];
            kernels::conv2d_backward(
                geom,
                before[x.0].value.data(),
                before[w.0].value.data(),
                &g,
                &mut dx,
                &mut dw,
                &mut db,
            );
            accumulate(before, *x, &dx);
            accumulate(before, *w, &dw);
            accumulate(before, *b, &db);
        }
        Op::Pointwise(x, kind) => {
            let d: Vec<f64> = match kind {
                Pointwise::Relu => before[x.0]
                    .value
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect(),
                Pointwise::Sigmoid => node
                    .value
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect(),
            };
            accumulate(before, *x, &d);
        }
        Op::Combine(a, b, kind) => match kind {
            Combine::Add => {
                accumulate(before, *a, &g);
                accumulate(before, *b, &g);
            }
            Combine::Mul => {
                let da: Vec<f64> = before[b.0].value.data().iter().zip(&g).map(|(q, gv)| q * gv).collect();
                let db: Vec<f64> = before[a.0].value.data().iter().zip(&g).map(|(p, gv)| p * gv).collect();
                accumulate(before, *a, &da);
                accumulate(before, *b, &db);
            }
            Combine::Max => {
                let (va, vb) = (before[a.0].value.data(), before[b.0].value.data());
                let mut da = vec![0.0; g.len()];
                let mut db = vec![0.0; g.len()];
                for i in 0..g.len() {
                    if va[i] >= vb[i] {
                        da[i] = g[i];
                    } else {
                        db[i] = g[i];
                    }
                }
                accumulate(before, *a, &da);
                accumulate(before, *b, &db);
            }
            Combine::Concat => {
                let (sa, sb) = (before[a.0].value.shape(), before[b.0].value.shape());
                let mut da = Vec::with_capacity(sa.numel());
                let mut db = Vec::with_capacity(sb.numel());
                let item = sa.item_len() + sb.item_len();
                for chunk in g.chunks_exact(item) {
                    da.extend_from_slice(&chunk[..sa.item_len()]);
                    db.extend_from_slice(&chunk[sa.item_len()..]);
                }
                accumulate(before, *a, &da);
                accumulate(before, *b, &db);
            }
        },
        Op::Scale(x, s) => {
            let d: Vec<f64> = g.iter().map(|gv| gv * s).collect();
            accumulate(before, *x, &d);
        }
        Op::SliceChannels { x, start } => {
            let xs = before[x.0].value.shape();
            let os = node.value.shape();
            let mut d = vec![0.0; xs.numel()];
            for n in 0..xs.n {
                let dst = n * xs.item_len() + start * xs.plane();
                d[dst..dst + os.item_len()]
                    .copy_from_slice(&g[n * os.item_len()..(n + 1) * os.item_len()]);
            }
            accumulate(before, *x, &d);
        }
        Op::RoiPool { x, argmax } => {
            let grad = before[x.0].value.grad_mut();
            for (&src, gv) in argmax.iter().zip(&g) {
                grad[src] += gv;
            }
        }
        Op::GlobalAvgPool(x) => {
            let xs = before[x.0].value.shape();
            let plane = xs.plane();
            let inv = 1.0 / plane as f64;
            let grad = before[x.0].value.grad_mut();
            for (chunk, gv) in grad.chunks_exact_mut(plane).zip(&g) {
                chunk.iter_mut().for_each(|v| *v += gv * inv);
            }
        }
        Op::Dense { x, w, b } => {
            let n = before[x.0].value.shape().n;
            let mut dx = vec![0.0; before[x.0].value.len()];
            let mut dw = vec![0.0; before[w.0].value.len()];
            let mut db = vec![0.0; before[b.0].value.len()];
            kernels::dense_backward(
                before[x.0].value.data(),
                n,
                before[w.0].value.data(),
                &g,
                &mut dx,
                &mut dw,
                &mut db,
            );
            accumulate(before, *x, &dx);
            accumulate(before, *w, &dw);
            accumulate(before, *b, &db);
        }
        Op::SoftmaxCe { logits, labels, probs, scale } => {
            let k = before[logits.0].value.shape().item_len();
            let mut d: Vec<f64> = probs.iter().map(|p| p * scale * g[0]).collect();
            for (n, &y) in labels.iter().enumerate() {
                d[n * k + y] -= scale * g[0];
            }
            accumulate(before, *logits, &d);
        }
        Op::SmoothL1 { pred, targets, scale } => {
            let width = before[pred.0].value.shape().item_len();
            let mut d = vec![0.0; before[pred.0].value.len()];
            let p = before[pred.0].value.data();
            for (n, t) in targets.iter().enumerate() {
                if let Some((class, v)) = t {
                    let base = n * width + 4 * (class - 1);
                    for i in 0..4 {
                        let (_, slope) = smooth_l1(v[i] - p[base + i]);
                        d[base + i] = -slope * scale * g[0];
                    }
                }
            }
            accumulate(before, *pred, &d);
        }
        Op::WeightedSum { x, weights } => {
            let d: Vec<f64> = weights.iter().map(|w| w * g[0]).collect();
            accumulate(before, *x, &d);
        }
        Op::Custom { inputs, backward } => {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &before[v.0].value).collect();
            let grads = backward(&vals, &g);
            for (v, d) in inputs.iter().zip(grads) {
                accumulate(before, *v, &d);
            }
        }
    }
}
