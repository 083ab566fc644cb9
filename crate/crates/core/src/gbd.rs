//! Gated bi-directional message passing across context branches.
//!
//! Branch `i` holds features pooled with the `i`-th context pad, ordered from
//! the smallest support region to the largest. Two recursions run over the
//! branches:
//!
//! ```text
//! h1[i] = relu(h0[i] * w1[i] + b01[i]) + G1[i] . relu(h1[i-1] * w1[i-1,i] + b1[i])
//! h2[i] = relu(h0[i] * w2[i] + b02[i]) + G2[i] . relu(h2[i+1] * w2[i,i+1] + b2[i])
//! G1[i] = sigmoid(h0[i-1] * wg[i-1,i] + bg[i-1,i])
//! G2[i] = sigmoid(h0[i+1] * wg[i+1,i] + bg[i+1,i])
//! ```
//!
//! The first branch receives no forward message and the last no backward
//! message. v1 merges with `relu(cat(h1, h2) * w3 + b3)`; v2 merges with
//! `h0 + beta * max(h1, h2)`. Ungated v1 drops the `G` factors.

use crate::autograd::{BoundParam, BoundParams, ConvParams, Graph, Param, ParamStore, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Kernel size of every message, self and gate convolution.
pub const GBD_KERNEL: usize = 3;
/// Kernel size of the v1 merge convolution.
pub const MERGE_KERNEL: usize = 1;
pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GbdVersion {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "v1")]
    V1,
    #[serde(rename = "v1-gated")]
    V1Gated,
    #[serde(rename = "v2")]
    V2,
}

impl GbdVersion {
    pub fn gated(self) -> bool {
        matches!(self, GbdVersion::V1Gated | GbdVersion::V2)
    }
}

impl std::str::FromStr for GbdVersion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GbdVersion::None),
            "v1" => Ok(GbdVersion::V1),
            "v1-gated" => Ok(GbdVersion::V1Gated),
            "v2" => Ok(GbdVersion::V2),
            other => Err(Error::Config(format!("unknown gbd version `{other}`"))),
        }
    }
}

/// Per-branch feature maps of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchFeatures {
    h: Vec<Tensor>,
}

impl BranchFeatures {
    pub fn new(h: Vec<Tensor>) -> Result<Self> {
        let Some(first) = h.first() else {
            return shape_err("no branches");
        };
        if let Some(bad) = h.iter().find(|t| t.shape() != first.shape()) {
            return shape_err(format!("branch shapes differ: {} vs {}", bad.shape(), first.shape()));
        }
        Ok(Self { h })
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn branches(&self) -> &[Tensor] {
        &self.h
    }

    pub fn into_inner(self) -> Vec<Tensor> {
        self.h
    }
}

/// Layout of one GBD layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbdLayout {
    pub branches: usize,
    pub channels: usize,
    pub version: GbdVersion,
    pub beta: f64,
}

pub fn self_name(dir: usize, i: usize) -> String {
    format!("self{dir}.{i}")
}

pub fn msg_name(dir: usize, i: usize) -> String {
    format!("msg{dir}.{i}")
}

pub fn gate_name(dir: usize, i: usize) -> String {
    format!("gate{dir}.{i}")
}

pub fn merge_name(i: usize) -> String {
    format!("merge.{i}")
}

/// Parameters of one GBD layer; nothing is shared between branches.
#[derive(Clone, Debug, PartialEq)]
pub struct GbdParams {
    pub layout: GbdLayout,
    pub store: ParamStore,
}

impl GbdParams {
    /// Zero-initialised parameters for `layout`.
    pub fn zeros(layout: GbdLayout) -> Result<Self> {
        let (n, c) = (layout.branches, layout.channels);
        if n == 0 || c == 0 {
            return Err(Error::Config("gbd layer needs branches and channels".into()));
        }
        let mut store = ParamStore::new();
        if layout.version == GbdVersion::None {
            return Ok(Self { layout, store });
        }
        let conv = |k| ConvParams::zeros(c, c, k).map(Param::Conv);
        for i in 0..n {
            for dir in [1, 2] {
                store.insert(self_name(dir, i), conv(GBD_KERNEL)?)?;
            }
            if i > 0 {
                store.insert(msg_name(1, i), conv(GBD_KERNEL)?)?;
            }
            if i + 1 < n {
                store.insert(msg_name(2, i), conv(GBD_KERNEL)?)?;
            }
            if layout.version.gated() {
                if i > 0 {
                    store.insert(gate_name(1, i), conv(GBD_KERNEL)?)?;
                }
                if i + 1 < n {
                    store.insert(gate_name(2, i), conv(GBD_KERNEL)?)?;
                }
            }
            if matches!(layout.version, GbdVersion::V1 | GbdVersion::V1Gated) {
                store.insert(
                    merge_name(i),
                    Param::Conv(ConvParams::zeros(c, 2 * c, MERGE_KERNEL)?),
                )?;
            }
        }
        Ok(Self { layout, store })
    }

    pub fn bind(&self, g: &mut Graph) -> BoundGbd {
        BoundGbd {
            layout: self.layout,
            params: self.store.bind(g),
        }
    }

    /// Runs the layer on plain tensors.
    pub fn apply(&self, h0: &BranchFeatures) -> Result<BranchFeatures> {
        let mut g = Graph::new();
        let inputs: Vec<Var> = h0.branches().iter().map(|t| g.leaf(t.clone())).collect();
        let bound = self.bind(&mut g);
        let out = gbd_forward(&mut g, &inputs, &bound)?;
        BranchFeatures::new(out.h3.iter().map(|v| g.value(*v).clone()).collect())
    }
}

/// Fan-based uniform initialisation of every GBD weight; biases zero.
/// Deterministic in `seed`.
pub fn init_gbd_params(seed: u64, channels: usize, scheme: GbdLayout) -> Result<GbdParams> {
    let mut p = GbdParams::zeros(GbdLayout { channels, ..scheme })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, param) in p.store.iter_mut() {
        param.xavier_uniform(&mut rng);
    }
    Ok(p)
}

/// A [`GbdParams`] placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundGbd {
    pub layout: GbdLayout,
    pub params: BoundParams,
}

impl BoundGbd {
    fn get(&self, name: &str) -> Result<BoundParam> {
        self.params.get(name)
    }
}

/// All intermediate nodes of one layer evaluation.
#[derive(Clone, Debug, Default)]
pub struct GbdOutputs {
    pub h1: Vec<Var>,
    pub h2: Vec<Var>,
    pub h3: Vec<Var>,
    /// Every gate map evaluated (empty when ungated).
    pub gates: Vec<Var>,
}

/// `sigmoid(h0_neighbor * wg + bg)`, the per-cell message passing rate.
pub fn gate_map(g: &mut Graph, h0_neighbor: Var, gate: BoundParam) -> Result<Var> {
    let z = g.conv2d_same(h0_neighbor, gate.w, gate.b)?;
    Ok(g.sigmoid(z))
}

/// Gate map on plain tensors.
pub fn gate_map_tensor(h0_neighbor: &Tensor, gate: &ConvParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.leaf(h0_neighbor.clone());
    let w = g.leaf(gate.weights.clone());
    let b = g.leaf(gate.bias.clone());
    let out = gate_map(&mut g, x, crate::autograd::BoundParam { w, b })?;
    Ok(g.value(out).clone())
}

fn check_branches(g: &Graph, h0: &[Var], layout: &GbdLayout) -> Result<()> {
    if h0.len() != layout.branches {
        return shape_err(format!("{} branches for a {}-branch layer", h0.len(), layout.branches));
    }
    let s = g.shape(h0[0]);
    if s.c != layout.channels {
        return shape_err(format!("branch has {} channels, layer expects {}", s.c, layout.channels));
    }
    if let Some(bad) = h0.iter().find(|v| g.shape(**v) != s) {
        return shape_err(format!("branch shapes differ: {} vs {s}", g.shape(*bad)));
    }
    Ok(())
}

fn conv_relu(g: &mut Graph, x: Var, p: BoundParam) -> Result<Var> {
    let z = g.conv2d_same(x, p.w, p.b)?;
    Ok(g.relu(z))
}

/// Both directional recursions (`dir` 1 runs small-to-large context, 2 the
/// reverse).
fn directional(
    g: &mut Graph,
    h0: &[Var],
    p: &BoundGbd,
    dir: usize,
    gated: bool,
    gates: &mut Vec<Var>,
) -> Result<Vec<Var>> {
    let n = h0.len();
    let mut out: Vec<Option<Var>> = vec![None; n];
    let order: Vec<usize> = if dir == 1 { (0..n).collect() } else { (0..n).rev().collect() };
    let mut prev: Option<(usize, Var)> = None;
    for i in order {
        let own = conv_relu(g, h0[i], p.get(&self_name(dir, i))?)?;
        let h = match prev {
            None => own,
            Some((j, hj)) => {
                let mut msg = conv_relu(g, hj, p.get(&msg_name(dir, i))?)?;
                if gated {
                    let gate = gate_map(g, h0[j], p.get(&gate_name(dir, i))?)?;
                    gates.push(gate);
                    msg = g.mul(gate, msg)?;
                }
                g.add(own, msg)?
            }
        };
        out[i] = Some(h);
        prev = Some((i, h));
    }
    Ok(out.into_iter().map(|v| v.expect("every branch visited")).collect())
}

/// v1 layer: `h3[i] = relu(cat(h1[i], h2[i]) * w3[i] + b3[i])`.
pub fn gbd_v1_forward(g: &mut Graph, h0: &[Var], p: &BoundGbd, gated: bool) -> Result<GbdOutputs> {
    check_branches(g, h0, &p.layout)?;
    let mut out = GbdOutputs::default();
    out.h1 = directional(g, h0, p, 1, gated, &mut out.gates)?;
    out.h2 = directional(g, h0, p, 2, gated, &mut out.gates)?;
    for i in 0..h0.len() {
        let cat = g.concat_channels(out.h1[i], out.h2[i])?;
        let merge = p.get(&merge_name(i))?;
        let z = g.conv2d_same(cat, merge.w, merge.b)?;
        out.h3.push(g.relu(z));
    }
    Ok(out)
}

/// v2 layer: `h3[i] = h0[i] + beta * max(h1[i], h2[i])`, always gated.
pub fn gbd_v2_forward(g: &mut Graph, h0: &[Var], p: &BoundGbd) -> Result<GbdOutputs> {
    check_branches(g, h0, &p.layout)?;
    let mut out = GbdOutputs::default();
    out.h1 = directional(g, h0, p, 1, true, &mut out.gates)?;
    out.h2 = directional(g, h0, p, 2, true, &mut out.gates)?;
    for i in 0..h0.len() {
        let merged = g.emax(out.h1[i], out.h2[i])?;
        let scaled = g.scale(merged, p.layout.beta);
        out.h3.push(g.add(h0[i], scaled)?);
    }
    Ok(out)
}

/// Dispatches on the layout's version; `None` passes the branches through.
pub fn gbd_forward(g: &mut Graph, h0: &[Var], p: &BoundGbd) -> Result<GbdOutputs> {
    match p.layout.version {
        GbdVersion::None => Ok(GbdOutputs {
            h3: h0.to_vec(),
            ..GbdOutputs::default()
        }),
        GbdVersion::V1 => gbd_v1_forward(g, h0, p, false),
        GbdVersion::V1Gated => gbd_v1_forward(g, h0, p, true),
        GbdVersion::V2 => gbd_v2_forward(g, h0, p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::Rng;

    fn layout(version: GbdVersion, beta: f64) -> GbdLayout {
        GbdLayout {
            branches: 4,
            channels: 3,
            version,
            beta,
        }
    }

    fn random_branches(seed: u64, shape: Shape) -> BranchFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BranchFeatures::new(
            (0..4)
                .map(|_| {
                    let d = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    Tensor::from_vec(shape, d).unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn gate_of_zero_is_half() {
        let gate = ConvParams::zeros(3, 3, 3).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 4, 4));
        let out = gate_map_tensor(&x, &gate).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn negative_gate_bias_blocks_messages() {
        let mut gate = ConvParams::zeros(2, 2, 3).unwrap();
        let x = Tensor::full(Shape::new(1, 2, 3, 3), 0.3);
        let mut last = 1.0;
        for b in [-1.0, -5.0, -20.0, -40.0] {
            gate.bias.data_mut().iter_mut().for_each(|v| *v = b);
            let m = gate_map_tensor(&x, &gate).unwrap().max_abs();
            assert!(m < last && m > 0.0);
            last = m;
        }
        assert!(last < 1e-17);
    }

    #[test]
    fn params_are_not_shared() {
        let p = init_gbd_params(3, 3, layout(GbdVersion::V1Gated, 0.1)).unwrap();
        let names: Vec<_> = p.store.iter().map(|(n, _)| n.clone()).collect();
        // 8 self, 6 messages, 6 gates, 4 merges
        assert_eq!(names.len(), 24);
        let a = p.store.conv("self1.0").unwrap();
        let b = p.store.conv("self1.1").unwrap();
        assert_ne!(a.weights, b.weights);
        assert!(p.store.iter().filter(|(n, _)| n.starts_with("gate")).all(|(_, q)| {
            q.weights().shape().h == 3 && q.weights().shape().w == 3
        }));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let l = layout(GbdVersion::V2, 0.1);
        let a = init_gbd_params(11, 3, l).unwrap();
        assert_eq!(a, init_gbd_params(11, 3, l).unwrap());
        assert_ne!(a, init_gbd_params(12, 3, l).unwrap());
        for (_, p) in a.store.iter() {
            let (fi, fo) = p.fans();
            let bound = (6.0 / (fi + fo) as f64).sqrt();
            assert!(p.weights().data().iter().all(|v| v.abs() <= bound));
            assert!(p.bias().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_weights_have_zero_mean() {
        // 16 channels: each 3x3 conv holds 2304 weights; collect >= 1e4 draws
        let l = GbdLayout { branches: 4, channels: 16, version: GbdVersion::V2, beta: 0.1 };
        let p = init_gbd_params(5, 16, l).unwrap();
        let w: Vec<f64> = p.store.iter().flat_map(|(_, q)| q.weights().data().to_vec()).take(10_000).collect();
        assert_eq!(w.len(), 10_000);
        let bound = (6.0f64 / (2.0 * 16.0 * 9.0)).sqrt();
        let sigma = bound / 3f64.sqrt();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 3.0 * sigma / 100.0, "mean {mean}");
    }

    #[test]
    fn v2_with_zero_beta_is_identity() {
        let p = init_gbd_params(1, 3, layout(GbdVersion::V2, 0.0)).unwrap();
        let h0 = random_branches(2, Shape::new(2, 3, 5, 5));
        let out = p.apply(&h0).unwrap();
        for (a, b) in out.branches().iter().zip(h0.branches()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn zeroed_messages_decouple_branches() {
        let mut p = init_gbd_params(4, 3, layout(GbdVersion::V1, 0.1)).unwrap();
        for (name, q) in p.store.iter_mut() {
            if name.starts_with("msg") {
                let (w, b) = q.parts_mut();
                w.data_mut().iter_mut().for_each(|v| *v = 0.0);
                b.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let h0 = random_branches(9, Shape::new(1, 3, 4, 4));
        let mut g = Graph::new();
        let xs: Vec<Var> = h0.branches().iter().map(|t| g.leaf(t.clone())).collect();
        let bound = p.bind(&mut g);
        let out = gbd_forward(&mut g, &xs, &bound).unwrap();
        for i in 0..4 {
            let own = p.store.conv(&self_name(1, i)).unwrap();
            let mut g2 = Graph::new();
            let x = g2.leaf(h0.branches()[i].clone());
            let w = g2.leaf(own.weights.clone());
            let b = g2.leaf(own.bias.clone());
            let z = g2.conv2d_same(x, w, b).unwrap();
            let r = g2.relu(z);
            assert_eq!(g.value(out.h1[i]).data(), g2.value(r).data());
        }
    }

    #[test]
    fn branch_permutation_does_not_commute() {
        let p = init_gbd_params(6, 3, layout(GbdVersion::V1Gated, 0.1)).unwrap();
        let h0 = random_branches(7, Shape::new(1, 3, 4, 4));
        let base = p.apply(&h0).unwrap();
        // swap branch contents 0 <-> 1 and their self convolutions
        let mut swapped_h = h0.clone().into_inner();
        swapped_h.swap(0, 1);
        let mut q = p.clone();
        for dir in [1, 2] {
            let a = p.store.conv(&self_name(dir, 0)).unwrap().clone();
            let b = p.store.conv(&self_name(dir, 1)).unwrap().clone();
            *q.store.conv_mut(&self_name(dir, 0)).unwrap() = b;
            *q.store.conv_mut(&self_name(dir, 1)).unwrap() = a;
        }
        let out = q.apply(&BranchFeatures::new(swapped_h).unwrap()).unwrap();
        let diff = (0..4)
            .map(|i| {
                let j = [1, 0, 2, 3][i];
                out.branches()[i]
                    .data()
                    .iter()
                    .zip(base.branches()[j].data())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        assert!(diff > 1e-6, "outputs unexpectedly commute: {diff}");
    }

    #[test]
    fn h1_flows_only_upward() {
        let p = init_gbd_params(8, 3, layout(GbdVersion::V2, 0.5)).unwrap();
        let h0 = random_branches(10, Shape::new(1, 3, 4, 4));
        let eval = |h: &BranchFeatures| {
            let mut g = Graph::new();
            let xs: Vec<Var> = h.branches().iter().map(|t| g.leaf(t.clone())).collect();
            let bound = p.bind(&mut g);
            let out = gbd_forward(&mut g, &xs, &bound).unwrap();
            let h1: Vec<Tensor> = out.h1.iter().map(|v| g.value(*v).clone()).collect();
            let h2: Vec<Tensor> = out.h2.iter().map(|v| g.value(*v).clone()).collect();
            (h1, h2)
        };
        let (h1, h2) = eval(&h0);
        let mut top = h0.clone().into_inner();
        top[3] = top[3].map(|v| v + 0.7);
        let (t1, t2) = eval(&BranchFeatures::new(top).unwrap());
        for i in 0..3 {
            assert_eq!(h1[i], t1[i]);
        }
        assert_ne!(h2[0], t2[0]);
        let mut bottom = h0.clone().into_inner();
        bottom[0] = bottom[0].map(|v| v - 0.7);
        let (b1, b2) = eval(&BranchFeatures::new(bottom).unwrap());
        for i in 1..4 {
            assert_eq!(h2[i], b2[i]);
        }
        assert_ne!(h1[3], b1[3]);
    }

    #[test]
    fn v2_message_bound() {
        for seed in 0..10 {
            let beta = 0.1 * (seed as f64 + 1.0);
            let p = init_gbd_params(seed, 3, layout(GbdVersion::V2, beta)).unwrap();
            let h0 = random_branches(100 + seed, Shape::new(1, 3, 5, 5));
            let mut g = Graph::new();
            let xs: Vec<Var> = h0.branches().iter().map(|t| g.leaf(t.clone())).collect();
            let bound = p.bind(&mut g);
            let out = gbd_forward(&mut g, &xs, &bound).unwrap();
            for i in 0..4 {
                let delta = g
                    .value(out.h3[i])
                    .data()
                    .iter()
                    .zip(h0.branches()[i].data())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                let cap = beta * g.value(out.h1[i]).max_abs().max(g.value(out.h2[i]).max_abs());
                assert!(delta <= cap * (1.0 + 1e-12) + 1e-15, "{delta} > {cap}");
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = init_gbd_params(1, 3, layout(GbdVersion::V2, 0.1)).unwrap();
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(Shape::new(1, 3, 4, 4)));
        let b = g.leaf(Tensor::zeros(Shape::new(1, 3, 5, 5)));
        let bound = p.bind(&mut g);
        assert!(gbd_forward(&mut g, &[a, a, a, b], &bound).is_err());
        assert!(gbd_forward(&mut g, &[a, a, a], &bound).is_err());
    }
}
