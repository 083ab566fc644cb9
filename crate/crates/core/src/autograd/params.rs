use super::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Shape, Tensor};
use rand::Rng;
use std::collections::BTreeMap;

/// Convolution weights `(out_c, in_c, k, k)` and bias `(1, out_c, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    /// Zero-initialised parameters; `k` must be odd.
    pub fn zeros(out_c: usize, in_c: usize, k: usize) -> Result<Self> {
        if k % 2 == 0 {
            return shape_err(format!("kernel size {k} must be odd"));
        }
        Ok(Self {
            weights: Tensor::zeros(Shape::new(out_c, in_c, k, k)),
            bias: Tensor::zeros(Shape::new(1, out_c, 1, 1)),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().c
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape().h
    }
}

/// Dense weights `(rows, cols, 1, 1)` and bias `(1, rows, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl DenseParams {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            weights: Tensor::zeros(Shape::new(rows, cols, 1, 1)),
            bias: Tensor::zeros(Shape::new(1, rows, 1, 1)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Param {
    Conv(ConvParams),
    Dense(DenseParams),
}

impl Param {
    pub fn weights(&self) -> &Tensor {
        match self {
            Param::Conv(p) => &p.weights,
            Param::Dense(p) => &p.weights,
        }
    }

    pub fn bias(&self) -> &Tensor {
        match self {
            Param::Conv(p) => &p.bias,
            Param::Dense(p) => &p.bias,
        }
    }

    pub fn parts_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        match self {
            Param::Conv(p) => (&mut p.weights, &mut p.bias),
            Param::Dense(p) => (&mut p.weights, &mut p.bias),
        }
    }

    /// `(fan_in, fan_out)` of the weight tensor.
    pub fn fans(&self) -> (usize, usize) {
        let s = self.weights().shape();
        (s.c * s.plane(), s.n * s.plane())
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, bias zero.
    pub fn xavier_uniform(&mut self, rng: &mut impl Rng) {
        let (fi, fo) = self.fans();
        let bound = (6.0 / (fi + fo) as f64).sqrt();
        let (w, b) = self.parts_mut();
        for v in w.data_mut() {
            *v = rng.gen_range(-bound..=bound);
        }
        b.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Parameter tensors keyed by unique name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundParam {
    pub w: Var,
    pub b: Var,
}

/// Tape leaves for every entry of a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    map: BTreeMap<String, BoundParam>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<BoundParam> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Index(format!("parameter `{name}` is not bound")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }
}

impl FromIterator<(String, BoundParam)> for BoundParams {
    fn from_iter<I: IntoIterator<Item = (String, BoundParam)>>(iter: I) -> Self {
        Self {
            map: iter.into_iter().collect(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, p: Param) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, p);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn conv(&self, name: &str) -> Result<&ConvParams> {
        match self.entries.get(name) {
            Some(Param::Conv(c)) => Ok(c),
            _ => Err(Error::Index(format!("no conv parameter `{name}`"))),
        }
    }

    pub fn conv_mut(&mut self, name: &str) -> Result<&mut ConvParams> {
        match self.entries.get_mut(name) {
            Some(Param::Conv(c)) => Ok(c),
            _ => Err(Error::Index(format!("no conv parameter `{name}`"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries
            .values()
            .map(|p| p.weights().len() + p.bias().len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            let (w, b) = p.parts_mut();
            w.zero_grad();
            b.zero_grad();
        }
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let map = self
            .entries
            .iter()
            .map(|(name, p)| {
                let w = g.leaf(p.weights().clone());
                let b = g.leaf(p.bias().clone());
                (name.clone(), BoundParam { w, b })
            })
            .collect();
        BoundParams { map }
    }

    /// Adds the tape gradients of bound leaves into the stored gradients.
    pub fn pull_grads(&mut self, g: &Graph, bound: &BoundParams) {
        for (name, bp) in &bound.map {
            if let Some(p) = self.entries.get_mut(name) {
                let (w, b) = p.parts_mut();
                for (dst, src) in w.grad_mut().iter_mut().zip(g.grad(bp.w)) {
                    *dst += src;
                }
                for (dst, src) in b.grad_mut().iter_mut().zip(g.grad(bp.b)) {
                    *dst += src;
                }
            }
        }
    }

    /// Largest absolute gradient entry across all parameters.
    pub fn max_abs_grad(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|p| p.weights().grad().iter().chain(p.bias().grad()))
            .fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// `theta <- theta - lr * (grad + weight_decay * theta)`, then clears the
/// gradients. Fails without touching anything if a gradient is non-finite.
pub fn sgd_step(store: &mut ParamStore, lr: f64, weight_decay: f64) -> Result<()> {
    for (name, p) in store.iter() {
        let finite = p.weights().grad().iter().chain(p.bias().grad()).all(|g| g.is_finite());
        if !finite {
            return Err(Error::Training {
                param: name.clone(),
                msg: "non-finite gradient".into(),
            });
        }
    }
    for (_, p) in store.iter_mut() {
        let (w, b) = p.parts_mut();
        for t in [w, b] {
            let grad = t.take_grad();
            for (v, g) in t.data_mut().iter_mut().zip(&grad) {
                *v -= lr * (g + weight_decay * *v);
            }
            t.put_grad(vec![0.0; grad.len()]);
        }
    }
    Ok(())
}

/// SGD with optional heavy-ball momentum:
/// `v <- momentum * v + grad + weight_decay * theta`, `theta <- theta - lr * v`.
/// With zero momentum a step equals [`sgd_step`].
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, [Vec<f64>; 2]>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every parameter of `store` and clears its gradients. Fails
    /// without touching anything if a gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.momentum == 0.0 {
            return sgd_step(store, self.lr, self.weight_decay);
        }
        for (name, p) in store.iter() {
            if !p.weights().grad().iter().chain(p.bias().grad()).all(|g| g.is_finite()) {
                return Err(Error::Training {
                    param: name.clone(),
                    msg: "non-finite gradient".into(),
                });
            }
        }
        for (name, p) in store.iter_mut() {
            let (w, b) = p.parts_mut();
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| [vec![0.0; w.len()], vec![0.0; b.len()]]);
            for (t, v) in [w, b].into_iter().zip(vel.iter_mut()) {
                let grad = t.take_grad();
                for ((theta, g), vi) in t.data_mut().iter_mut().zip(&grad).zip(v.iter_mut()) {
                    *vi = self.momentum * *vi + g + self.weight_decay * *theta;
                    *theta -= self.lr * *vi;
                }
                t.put_grad(vec![0.0; grad.len()]);
            }
        }
        Ok(())
    }
}
