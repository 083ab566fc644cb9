//! Trunk before roi pooling, the head shared by every branch, box offset
//! coding and the detection loss.

use crate::autograd::{BoundParams, ConvParams, DenseParams, Graph, Param, ParamStore, RegressionTarget, Var};
use crate::boxes::BBox;
use crate::error::{shape_err, Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Total downsampling of the trunk.
pub const TRUNK_STRIDE: usize = 2;
/// Localization weight in the detection loss.
pub const DEFAULT_LAMBDA: f64 = 1.0;

pub const CONV1: &str = "trunk.conv1";
pub const CONV2: &str = "trunk.conv2";
pub const HEAD_CONV: &str = "head.conv";
pub const HEAD_CLS: &str = "head.cls";
pub const HEAD_REG: &str = "head.reg";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrunkLayout {
    pub in_channels: usize,
    /// Output channels of the two trunk convolutions.
    pub channels: [usize; 2],
    /// Foreground classes; the classifier emits one more logit for background.
    pub num_classes: usize,
}

impl TrunkLayout {
    pub fn feature_channels(&self) -> usize {
        self.channels[1]
    }
}

/// Trunk and head parameters. The head is one parameter set applied to every
/// branch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrunkParams {
    pub layout: TrunkLayout,
    pub store: ParamStore,
}

impl TrunkParams {
    pub fn zeros(layout: TrunkLayout) -> Result<Self> {
        if layout.num_classes == 0 || layout.channels.contains(&0) || layout.in_channels == 0 {
            return Err(Error::Config(format!("invalid trunk layout {layout:?}")));
        }
        let [c1, c2] = layout.channels;
        let k = layout.num_classes;
        let mut store = ParamStore::new();
        store.insert(CONV1, Param::Conv(ConvParams::zeros(c1, layout.in_channels, 3)?))?;
        store.insert(CONV2, Param::Conv(ConvParams::zeros(c2, c1, 3)?))?;
        store.insert(HEAD_CONV, Param::Conv(ConvParams::zeros(c2, c2, 3)?))?;
        store.insert(HEAD_CLS, Param::Dense(DenseParams::zeros(k + 1, c2)))?;
        store.insert(HEAD_REG, Param::Dense(DenseParams::zeros(4 * k, c2)))?;
        Ok(Self { layout, store })
    }

    pub fn init(seed: u64, layout: TrunkLayout) -> Result<Self> {
        let mut p = Self::zeros(layout)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, param) in p.store.iter_mut() {
            param.xavier_uniform(&mut rng);
        }
        Ok(p)
    }
}

/// `relu(conv3x3) -> relu(conv3x3, stride 2)`.
pub fn trunk_forward(g: &mut Graph, image: Var, p: &BoundParams) -> Result<Var> {
    let c1 = p.get(CONV1)?;
    let z = g.conv2d_same(image, c1.w, c1.b)?;
    let a = g.relu(z);
    let c2 = p.get(CONV2)?;
    let z = g.conv2d(a, c2.w, c2.b, TRUNK_STRIDE, 1)?;
    Ok(g.relu(z))
}

/// Branch-averaged class logits `(n, K + 1)` and offsets `(n, 4K)`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub logits: Var,
    pub offsets: Var,
}

/// Runs every branch through the shared head (conv, relu, global average
/// pool, two dense layers) and averages logits and offsets over branches.
pub fn head_forward(g: &mut Graph, h3: &[Var], p: &BoundParams) -> Result<HeadOutputs> {
    let Some(&first) = h3.first() else {
        return shape_err("head needs at least one branch");
    };
    let s = g.shape(first);
    if let Some(bad) = h3.iter().find(|v| g.shape(**v) != s) {
        return shape_err(format!("branch shapes differ: {} vs {s}", g.shape(*bad)));
    }
    let (conv, cls, reg) = (p.get(HEAD_CONV)?, p.get(HEAD_CLS)?, p.get(HEAD_REG)?);
    let mut logits: Option<Var> = None;
    let mut offsets: Option<Var> = None;
    for &h in h3 {
        let z = g.conv2d_same(h, conv.w, conv.b)?;
        let a = g.relu(z);
        let pooled = g.global_avg_pool(a);
        let l = g.dense(pooled, cls.w, cls.b)?;
        let o = g.dense(pooled, reg.w, reg.b)?;
        logits = Some(match logits {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
        offsets = Some(match offsets {
            None => o,
            Some(acc) => g.add(acc, o)?,
        });
    }
    let inv = 1.0 / h3.len() as f64;
    let (l, o) = (logits.expect("one branch"), offsets.expect("one branch"));
    let (logits, offsets) = if h3.len() == 1 {
        (l, o)
    } else {
        (g.scale(l, inv), g.scale(o, inv))
    };
    Ok(HeadOutputs { logits, offsets })
}

/// Row-wise softmax of a `(n, k)` logit buffer.
pub fn softmax(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    out
}

/// Regression targets `((gx - px) / pw, (gy - py) / ph, ln(gw / pw), ln(gh / ph))`.
pub fn encode_offsets(proposal: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    proposal.validate()?;
    gt.validate()?;
    Ok([
        (gt.x - proposal.x) / proposal.w,
        (gt.y - proposal.y) / proposal.h,
        (gt.w / proposal.w).ln(),
        (gt.h / proposal.h).ln(),
    ])
}

pub fn decode_offsets(proposal: &BBox, t: &[f64; 4]) -> Result<BBox> {
    proposal.validate()?;
    BBox::new(
        proposal.x + t[0] * proposal.w,
        proposal.y + t[1] * proposal.h,
        proposal.w * t[2].exp(),
        proposal.h * t[3].exp(),
    )
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() <= 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Class label and offset targets of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionTargets {
    /// 0 is background.
    pub y: usize,
    pub v: [f64; 4],
}

/// `-ln t_c[y] + lambda [y >= 1] sum_i smooth_l1(v_i - t_v[4 (y - 1) + i])`.
///
/// `t_c` must be a probability vector over `K + 1` classes and `t_v` hold
/// `4K` per-class offsets.
pub fn detection_loss(t_c: &[f64], t_v: &[f64], y: usize, v: &[f64; 4], lambda: f64) -> Result<f64> {
    let total: f64 = t_c.iter().sum();
    if (total - 1.0).abs() > 1e-6 || t_c.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Contract(format!("class scores sum to {total}, not 1")));
    }
    if y >= t_c.len() {
        return Err(Error::Index(format!("label {y} for {} classes", t_c.len())));
    }
    if t_v.len() != 4 * (t_c.len() - 1) {
        return shape_err(format!("{} offsets for {} classes", t_v.len(), t_c.len() - 1));
    }
    let mut loss = -t_c[y].ln();
    if y >= 1 {
        let base = 4 * (y - 1);
        loss += lambda * (0..4).map(|i| smooth_l1(v[i] - t_v[base + i])).sum::<f64>();
    }
    Ok(loss.max(0.0))
}

/// Mean detection loss over the rows of a head output, as a scalar node.
pub fn detection_loss_node(
    g: &mut Graph,
    out: &HeadOutputs,
    targets: &[DetectionTargets],
    lambda: f64,
) -> Result<Var> {
    if targets.is_empty() {
        return shape_err("no targets");
    }
    let scale = 1.0 / targets.len() as f64;
    let labels: Vec<usize> = targets.iter().map(|t| t.y).collect();
    let cls = g.softmax_cross_entropy(out.logits, &labels, scale)?;
    let reg_targets: Vec<RegressionTarget> = targets
        .iter()
        .map(|t| (t.y >= 1).then_some((t.y, t.v)))
        .collect();
    let loc = g.smooth_l1(out.offsets, &reg_targets, scale * lambda)?;
    g.add(cls, loc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    #[test]
    fn offsets_examples() {
        let a = BBox::new(10.0, 10.0, 10.0, 10.0).unwrap();
        assert_eq!(encode_offsets(&a, &a).unwrap(), [0.0; 4]);
        let gt = BBox::new(12.0, 10.0, 20.0, 10.0).unwrap();
        let v = encode_offsets(&a, &gt).unwrap();
        let want = [0.2, 0.0, 2f64.ln(), 0.0];
        for (got, want) in v.iter().zip(want) {
            assert!((got - want).abs() < 1e-12);
        }
        let back = decode_offsets(&a, &v).unwrap();
        for (got, want) in [back.x, back.y, back.w, back.h].iter().zip([12.0, 10.0, 20.0, 10.0]) {
            assert!((got - want).abs() < 1e-9);
        }
        let bad = BBox { x: 0.0, y: 0.0, w: -1.0, h: 2.0 };
        assert!(matches!(encode_offsets(&bad, &a), Err(Error::Domain(_))));
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(1.0), 0.5);
        assert_eq!(smooth_l1(3.0), 2.5);
        assert_eq!(smooth_l1(-3.0), 2.5);
        // both one-sided slopes at |x| = 1 equal 1
        let h = 1e-7;
        let left = (smooth_l1(1.0) - smooth_l1(1.0 - h)) / h;
        let right = (smooth_l1(1.0 + h) - smooth_l1(1.0)) / h;
        assert!((left - 1.0).abs() < 1e-6 && (right - 1.0).abs() < 1e-6);
    }

    #[test]
    fn loss_examples() {
        let t_c = [0.7, 0.2, 0.1];
        let t_v = [0.5; 8];
        let l = detection_loss(&t_c, &t_v, 0, &[9.0; 4], 1.0).unwrap();
        assert!((l - (-0.7f64.ln())).abs() < 1e-15);
        let perfect = detection_loss(&[0.0, 0.0, 1.0], &t_v, 2, &[0.5; 4], 1.0).unwrap();
        assert_eq!(perfect, 0.0);
        let l = detection_loss(&t_c, &t_v, 1, &[1.5, 0.5, 0.5, 0.5], 1.0).unwrap();
        assert!((l - (-0.2f64.ln() + 0.5)).abs() < 1e-12);
        assert!(matches!(
            detection_loss(&[0.5, 0.6], &[0.0; 4], 0, &[0.0; 4], 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn identical_branches_average_to_one_branch() {
        let layout = TrunkLayout { in_channels: 3, channels: [4, 5], num_classes: 3 };
        let p = TrunkParams::init(2, layout).unwrap();
        let x = Tensor::from_vec(
            Shape::new(2, 5, 3, 3),
            (0..90).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let bound = p.store.bind(&mut g);
        let a = g.leaf(x.clone());
        let one = head_forward(&mut g, &[a], &bound).unwrap();
        let four = head_forward(&mut g, &[a, a, a, a], &bound).unwrap();
        for (u, v) in [(one.logits, four.logits), (one.offsets, four.offsets)] {
            for (p, q) in g.value(u).data().iter().zip(g.value(v).data()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
        assert_eq!(g.shape(one.logits), Shape::new(2, 4, 1, 1));
        assert_eq!(g.shape(one.offsets), Shape::new(2, 12, 1, 1));
    }
}
