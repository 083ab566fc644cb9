//! Candidate boxes: shaken copies of ground truth plus random boxes, or a
//! dense grid when no ground truth is available.

use super::config::JitterSpec;
use super::data::ObjectAnn;
use crate::boxes::{iou, shake_box, BBox, CornerRect, ShakeSpec};
use crate::error::Result;
use crate::head::encode_offsets;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Minimum overlap with a ground-truth box for a foreground label.
pub const POSITIVE_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    /// 0 for background.
    pub label: usize,
    /// Offsets to the matched ground truth; zero for background.
    pub target: [f64; 4],
}

/// Labels a box by its best-overlapping ground truth (first on ties).
pub fn label_box(b: &BBox, gts: &[ObjectAnn]) -> Result<Proposal> {
    let mut best: Option<(f64, &ObjectAnn)> = None;
    for g in gts {
        let o = iou(b, &g.bbox);
        if best.map_or(true, |(m, _)| o > m) {
            best = Some((o, g));
        }
    }
    match best {
        Some((o, g)) if o >= POSITIVE_IOU => Ok(Proposal {
            bbox: *b,
            label: g.class_id,
            target: encode_offsets(b, &g.bbox)?,
        }),
        _ => Ok(Proposal {
            bbox: *b,
            label: 0,
            target: [0.0; 4],
        }),
    }
}

/// `spec.per_gt` shaken copies of each ground-truth box (margin 0, edges
/// moved by up to `alpha` of the box size) and `spec.random` uniformly
/// placed boxes, all clipped to the image and labelled by overlap.
pub fn gen_proposals(gts: &[ObjectAnn], spec: &JitterSpec, width: usize, height: usize, seed: u64) -> Result<Vec<Proposal>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let shake = ShakeSpec {
        margin: 0,
        alpha_range: spec.alpha,
    };
    let mut boxes = Vec::with_capacity(gts.len() * spec.per_gt + spec.random);
    for g in gts {
        let [x1, y1, x2, y2] = g.bbox.corners();
        let rect = CornerRect::new(x1, y1, x2, y2);
        let mut made = 0;
        while made < spec.per_gt {
            let mut alphas = [0.0; 4];
            if spec.alpha > 0.0 {
                alphas.iter_mut().for_each(|a| *a = rng.gen_range(-spec.alpha..=spec.alpha));
            }
            let Ok(r) = shake_box(&rect, &shake, alphas) else { continue };
            if let Some(b) = BBox::from_corners(r.to_array()).ok().and_then(|b| b.clip(w, h)) {
                boxes.push(b);
                made += 1;
            }
        }
    }
    while boxes.len() < gts.len() * spec.per_gt + spec.random {
        let bw = rng.gen_range(spec.min_size..=spec.max_size);
        let bh = rng.gen_range(spec.min_size..=spec.max_size);
        let x = rng.gen_range(0.0..w);
        let y = rng.gen_range(0.0..h);
        if let Some(b) = BBox::new(x, y, bw, bh).ok().and_then(|b| b.clip(w, h)) {
            boxes.push(b);
        }
    }
    boxes.iter().map(|b| label_box(b, gts)).collect()
}

/// Square and rectangular windows of each size slid over the image.
pub fn grid_proposals(width: usize, height: usize, sizes: &[f64], stride: f64) -> Vec<BBox> {
    let mut out = Vec::new();
    for &s in sizes {
        for (bw, bh) in [(s, s), (s, 0.75 * s), (0.75 * s, s)] {
            let mut y = 0.5 * bh;
            while y + 0.5 * bh <= height as f64 {
                let mut x = 0.5 * bw;
                while x + 0.5 * bw <= width as f64 {
                    out.push(BBox { x, y, w: bw, h: bh });
                    x += stride;
                }
                y += stride;
            }
        }
    }
    out
}
