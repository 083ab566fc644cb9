//! The full detector: trunk, multi-context pooling, GBD layer, shared head.

use super::config::{PoolSource, RunConfig};
use crate::autograd::{BoundParams, Graph, Var};
use crate::boxes::{pad_box, BBox};
use crate::error::{Error, Result};
use crate::gbd::{init_gbd_params, BoundGbd, GbdLayout, GbdOutputs, GbdParams};
use crate::head::{head_forward, softmax, trunk_forward, HeadOutputs, TrunkLayout, TrunkParams, TRUNK_STRIDE};
use crate::roi::{box_to_feature_region, FeatureRegion};
use crate::tensor::Tensor;

/// Boxes evaluated per tape in [`Model::predict`].
const PREDICT_CHUNK: usize = 128;
/// Subtracted from pixel values before the trunk.
pub const PIXEL_MEAN: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: RunConfig,
    pub num_classes: usize,
    pub trunk: TrunkParams,
    pub gbd: GbdParams,
}

#[derive(Clone, Debug)]
pub struct BoundModel {
    pub trunk: BoundParams,
    pub gbd: BoundGbd,
}

#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    /// Branch features entering the GBD layer.
    pub h0: Vec<Var>,
    pub gbd: GbdOutputs,
    pub head: HeadOutputs,
}

/// Class probabilities `(n, K + 1)` and offsets `(n, 4K)` of a set of boxes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawScores {
    pub probs: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl RawScores {
    pub fn len(&self, num_classes: usize) -> usize {
        self.probs.len() / (num_classes + 1)
    }

    pub fn extend(&mut self, other: RawScores) {
        self.probs.extend(other.probs);
        self.offsets.extend(other.offsets);
    }
}

pub fn normalize(image: &Tensor) -> Tensor {
    image.map(|v| v - PIXEL_MEAN)
}

impl Model {
    /// Fresh parameters; trunk and GBD are initialised from `config.seed`.
    pub fn init(config: &RunConfig, num_classes: usize) -> Result<Self> {
        let layout = Self::layouts(config, num_classes)?;
        let trunk = TrunkParams::init(config.seed, layout.0)?;
        let gbd = init_gbd_params(config.seed.wrapping_add(1), layout.1.channels, layout.1)?;
        Ok(Self {
            config: config.clone(),
            num_classes,
            trunk,
            gbd,
        })
    }

    /// Zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &RunConfig, num_classes: usize) -> Result<Self> {
        let (t, g) = Self::layouts(config, num_classes)?;
        Ok(Self {
            config: config.clone(),
            num_classes,
            trunk: TrunkParams::zeros(t)?,
            gbd: GbdParams::zeros(g)?,
        })
    }

    fn layouts(config: &RunConfig, num_classes: usize) -> Result<(TrunkLayout, GbdLayout)> {
        config.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("model needs at least one class".into()));
        }
        let trunk = TrunkLayout {
            in_channels: 3,
            channels: config.channels,
            num_classes,
        };
        let gbd = GbdLayout {
            branches: config.pads.len(),
            channels: trunk.feature_channels(),
            version: config.gbd_version,
            beta: config.beta,
        };
        Ok((trunk, gbd))
    }

    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        BoundModel {
            trunk: self.trunk.store.bind(g),
            gbd: self.gbd.bind(g),
        }
    }

    /// Builds the forward pass for `rois = (batch item, box)` over a batch of
    /// normalised images.
    pub fn forward(&self, g: &mut Graph, bound: &BoundModel, images: Var, rois: &[(usize, BBox)]) -> Result<ForwardOutputs> {
        let s = g.shape(images);
        let out = self.config.roi_out;
        let regions = |p: f64, stride: usize, w: usize, h: usize| -> Result<Vec<(usize, FeatureRegion)>> {
            rois.iter()
                .map(|(item, b)| Ok((*item, box_to_feature_region(&pad_box(b, p)?, stride, w, h))))
                .collect()
        };
        let mut h0 = Vec::with_capacity(self.config.pads.len());
        match self.config.pool_source {
            PoolSource::Pixels => {
                for &p in &self.config.pads {
                    let crops = g.roi_pool(images, &regions(p, 1, s.w, s.h)?, TRUNK_STRIDE * out, TRUNK_STRIDE * out)?;
                    h0.push(trunk_forward(g, crops, &bound.trunk)?);
                }
            }
            PoolSource::Features => {
                let fmap = trunk_forward(g, images, &bound.trunk)?;
                let fs = g.shape(fmap);
                for &p in &self.config.pads {
                    h0.push(g.roi_pool(fmap, &regions(p, TRUNK_STRIDE, fs.w, fs.h)?, out, out)?);
                }
            }
        }
        let gbd = crate::gbd::gbd_forward(g, &h0, &bound.gbd)?;
        let head = head_forward(g, &gbd.h3, &bound.trunk)?;
        Ok(ForwardOutputs { h0, gbd, head })
    }

    /// Scores for `boxes` on one `(1, 3, H, W)` image in `[0, 1]`.
    pub fn predict(&self, image: &Tensor, boxes: &[BBox]) -> Result<RawScores> {
        let k = self.num_classes;
        let normalized = normalize(image);
        let mut raw = RawScores::default();
        for chunk in boxes.chunks(PREDICT_CHUNK) {
            let mut g = Graph::new();
            let x = g.leaf(normalized.clone());
            let bound = self.bind(&mut g);
            let rois: Vec<(usize, BBox)> = chunk.iter().map(|b| (0, *b)).collect();
            let out = self.forward(&mut g, &bound, x, &rois)?;
            raw.probs.extend(softmax(g.value(out.head.logits).data(), k + 1));
            raw.offsets.extend_from_slice(g.value(out.head.offsets).data());
        }
        Ok(raw)
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for store in [&mut self.trunk.store, &mut self.gbd.store] {
            for (_, p) in store.iter_mut() {
                let (w, b) = p.parts_mut();
                for t in [w, b] {
                    t.data_mut().iter_mut().for_each(|v| *v = f64::from(*v as f32));
                }
            }
        }
    }
}
