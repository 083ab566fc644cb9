//! Finite-difference gradient suite over every differentiable op and the
//! full GBD layers.

use crate::autograd::{grad_check, BoundParam, BoundParams, Graph, ParamStore, Var};
use crate::boxes::BBox;
use crate::error::Result;
use crate::gbd::{gbd_forward, init_gbd_params, BoundGbd, GbdLayout, GbdVersion};
use crate::head::{detection_loss_node, head_forward, DetectionTargets, TrunkLayout, TrunkParams};
use crate::roi::box_to_feature_region;
use crate::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const SUITE_EPS: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteCase {
    pub name: &'static str,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= SUITE_TOLERANCE
    }
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

fn sh(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w)
}

/// Parameters of `store` as suite inputs, in store order.
fn store_inputs(store: &ParamStore) -> (Vec<String>, Vec<Tensor>) {
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, p) in store.iter() {
        names.push(name.clone());
        tensors.push(p.weights().clone());
        tensors.push(p.bias().clone());
    }
    (names, tensors)
}

fn bind_from(names: &[String], vars: &[Var]) -> BoundParams {
    names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), BoundParam { w: vars[2 * i], b: vars[2 * i + 1] }))
        .collect()
}

fn gbd_case(version: GbdVersion, beta: f64, rng: &mut ChaCha8Rng) -> Result<(Build, Vec<Tensor>)> {
    let layout = GbdLayout {
        branches: 4,
        channels: 2,
        version,
        beta,
    };
    let params = init_gbd_params(rng.gen(), 2, layout)?;
    let (names, mut inputs) = store_inputs(&params.store);
    let np = inputs.len();
    for _ in 0..4 {
        inputs.push(random(sh(1, 2, 3, 3), rng));
    }
    let build: Build = Box::new(move |g, v| {
        let bound = BoundGbd {
            layout,
            params: bind_from(&names, &v[..np]),
        };
        let out = gbd_forward(g, &v[np..], &bound)?;
        let mut acc = out.h3[0];
        for &h in &out.h3[1..] {
            acc = g.concat_channels(acc, h)?;
        }
        Ok(acc)
    });
    Ok((build, inputs))
}

fn detector_case(rng: &mut ChaCha8Rng) -> Result<(Build, Vec<Tensor>)> {
    let layout = TrunkLayout {
        in_channels: 2,
        channels: [2, 3],
        num_classes: 2,
    };
    let trunk = TrunkParams::init(rng.gen(), layout)?;
    let (names, mut inputs) = store_inputs(&trunk.store);
    let np = inputs.len();
    for _ in 0..2 {
        inputs.push(random(sh(2, 3, 3, 3), rng));
    }
    let targets = vec![
        DetectionTargets { y: 1, v: [0.1, -0.2, 0.3, 0.05] },
        DetectionTargets { y: 0, v: [0.0; 4] },
    ];
    let build: Build = Box::new(move |g, v| {
        let bound = bind_from(&names, &v[..np]);
        let out = head_forward(g, &v[np..], &bound)?;
        detection_loss_node(g, &out, &targets, 1.0)
    });
    Ok((build, inputs))
}

fn cases(rng: &mut ChaCha8Rng) -> Result<Vec<(&'static str, Build, Vec<Tensor>)>> {
    let mut out: Vec<(&'static str, Build, Vec<Tensor>)> = Vec::new();
    for (name, stride, pad) in [("conv2d s1 p1", 1, 1), ("conv2d s2 p1", 2, 1), ("conv2d s1 p0", 1, 0)] {
        out.push((
            name,
            Box::new(move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad)),
            vec![random(sh(2, 2, 5, 5), rng), random(sh(3, 2, 3, 3), rng), random(sh(1, 3, 1, 1), rng)],
        ));
    }
    out.push(("relu", Box::new(|g, v| Ok(g.relu(v[0]))), vec![random(sh(2, 3, 3, 3), rng)]));
    out.push(("sigmoid", Box::new(|g, v| Ok(g.sigmoid(v[0]))), vec![random(sh(2, 3, 3, 3), rng)]));
    let pair = |rng: &mut ChaCha8Rng| vec![random(sh(2, 2, 3, 3), rng), random(sh(2, 2, 3, 3), rng)];
    out.push(("add", Box::new(|g, v| g.add(v[0], v[1])), pair(rng)));
    out.push(("mul", Box::new(|g, v| g.mul(v[0], v[1])), pair(rng)));
    out.push(("max", Box::new(|g, v| g.emax(v[0], v[1])), pair(rng)));
    out.push(("concat", Box::new(|g, v| g.concat_channels(v[0], v[1])), pair(rng)));
    out.push(("scale", Box::new(|g, v| Ok(g.scale(v[0], -0.7))), vec![random(sh(1, 2, 3, 3), rng)]));
    out.push(("slice", Box::new(|g, v| g.slice_channels(v[0], 1, 2)), vec![random(sh(2, 4, 3, 3), rng)]));
    let boxes = [BBox::new(3.0, 4.0, 5.0, 6.0)?, BBox::new(6.0, 5.0, 4.0, 8.0)?];
    let rois: Vec<_> = boxes.iter().enumerate().map(|(i, b)| (i, box_to_feature_region(b, 1, 8, 8))).collect();
    out.push(("roi max pool", Box::new(move |g, v| g.roi_pool(v[0], &rois, 3, 3)), vec![random(sh(2, 2, 8, 8), rng)]));
    out.push(("global avg pool", Box::new(|g, v| Ok(g.global_avg_pool(v[0]))), vec![random(sh(2, 3, 3, 3), rng)]));
    out.push((
        "dense",
        Box::new(|g, v| g.dense(v[0], v[1], v[2])),
        vec![random(sh(3, 2, 2, 1), rng), random(sh(5, 4, 1, 1), rng), random(sh(1, 5, 1, 1), rng)],
    ));
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
    out.push((
        "softmax cross-entropy",
        Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels, 0.25)),
        vec![random(sh(4, 3, 1, 1), rng).map(|x| 3.0 * x)],
    ));
    let targets: Vec<_> = (0..3)
        .map(|i| (i != 1).then(|| (i / 2 + 1, [rng.gen_range(-2.0..2.0), rng.gen(), -0.3, 1.5])))
        .collect();
    out.push((
        "smooth l1",
        Box::new(move |g, v| g.smooth_l1(v[0], &targets, 0.5)),
        vec![random(sh(3, 8, 1, 1), rng).map(|x| 2.0 * x)],
    ));
    let (b, i) = gbd_case(GbdVersion::V1, 0.0, rng)?;
    out.push(("gbd v1 layer", b, i));
    let (b, i) = gbd_case(GbdVersion::V1Gated, 0.0, rng)?;
    out.push(("gbd v1-gated layer", b, i));
    let (b, i) = gbd_case(GbdVersion::V2, 0.5, rng)?;
    out.push(("gbd v2 layer", b, i));
    let (b, i) = detector_case(rng)?;
    out.push(("shared head + detection loss", b, i));
    Ok(out)
}

/// Runs every case for `seeds` random instances; per case the worst error
/// over seeds is reported.
pub fn gradient_suite(seeds: usize) -> Result<Vec<SuiteCase>> {
    let mut summary: Vec<SuiteCase> = Vec::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        for (i, (name, build, inputs)) in cases(&mut rng)?.into_iter().enumerate() {
            let r = grad_check(build, &inputs, SUITE_EPS)?;
            if summary.len() <= i {
                summary.push(SuiteCase {
                    name,
                    seeds: 0,
                    max_rel_error: 0.0,
                    checked: 0,
                    skipped: 0,
                });
            }
            let s = &mut summary[i];
            s.seeds += 1;
            s.max_rel_error = s.max_rel_error.max(r.max_rel_error);
            s.checked += r.checked;
            s.skipped += r.skipped;
        }
    }
    Ok(summary)
}
