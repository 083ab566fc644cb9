//! Run configuration.

use crate::boxes::ContextSet;
use crate::error::{Error, Result};
use crate::gbd::{GbdVersion, DEFAULT_BETA};
use crate::head::DEFAULT_LAMBDA;
use crate::postprocess::DEFAULT_NMS_THRESH;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Where branch crops are pooled from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolSource {
    /// Trunk on the whole image, roi pooling on its feature map.
    Features,
    /// Roi pooling on raw pixels, trunk on each crop.
    Pixels,
}

/// Proposal sampling around ground truth plus random background boxes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterSpec {
    pub per_gt: usize,
    pub random: usize,
    /// Edge shake range as a fraction of the box size.
    pub alpha: f64,
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for JitterSpec {
    fn default() -> Self {
        Self {
            per_gt: 6,
            random: 6,
            alpha: 0.25,
            min_size: 5.0,
            max_size: 26.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub pads: Vec<f64>,
    pub gbd_version: GbdVersion,
    pub beta: f64,
    pub pool_source: PoolSource,
    pub nms_thresh: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub roi_out: usize,
    /// Shorter-side targets of the test pyramid.
    pub pyramid_scales: Vec<f64>,
    pub flip: bool,
    pub context_weight_search: bool,
    pub momentum: f64,
    pub epochs: usize,
    /// Output channels of the two trunk convolutions.
    pub channels: [usize; 2],
    pub lambda: f64,
    pub proposals: JitterSpec,
    /// Left-right mirroring of training images.
    pub flip_augment: bool,
    pub box_voting: bool,
    /// Global context fusion weight; overwritten by the search when enabled.
    pub context_weight: f64,
    /// Epochs at whose start the learning rate drops tenfold.
    pub lr_steps: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pads: ContextSet::DEFAULT_PADS.to_vec(),
            gbd_version: GbdVersion::V2,
            beta: DEFAULT_BETA,
            pool_source: PoolSource::Features,
            nms_thresh: DEFAULT_NMS_THRESH,
            lr: 0.0005,
            weight_decay: 0.0005,
            batch_size: 8,
            seed: 0,
            roi_out: 7,
            pyramid_scales: vec![48.0, 64.0, 96.0],
            flip: false,
            context_weight_search: false,
            momentum: 0.0,
            epochs: 10,
            channels: [8, 16],
            lambda: DEFAULT_LAMBDA,
            proposals: JitterSpec::default(),
            flip_augment: false,
            box_voting: true,
            context_weight: 0.0,
            lr_steps: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        ContextSet::new(self.pads.clone()).map_err(|e| Error::Config(format!("pads: {e}")))?;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.nms_thresh) {
            return bad(format!("nms_thresh {} outside [0, 1]", self.nms_thresh));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("weight_decay must be >= 0 and momentum in [0, 1)".into());
        }
        if self.batch_size == 0 || self.roi_out == 0 || self.channels.contains(&0) {
            return bad("batch_size, roi_out and channels must be positive".into());
        }
        if !self.beta.is_finite() || !(0.0..=1.0).contains(&self.context_weight) {
            return bad("beta must be finite and context_weight in [0, 1]".into());
        }
        if self.pyramid_scales.is_empty() || self.pyramid_scales.iter().any(|s| !(*s > 0.0)) {
            return bad("pyramid_scales must be nonempty and positive".into());
        }
        let j = &self.proposals;
        if !(j.alpha >= 0.0 && j.min_size > 0.0 && j.max_size >= j.min_size) {
            return bad(format!("invalid proposal spec {j:?}"));
        }
        Ok(())
    }

    pub fn context_set(&self) -> Result<ContextSet> {
        ContextSet::new(self.pads.clone())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
