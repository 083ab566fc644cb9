//! Test-time refinement: NMS, box voting, flip and context fusion, model
//! ensembles.

use crate::boxes::{flip_box, iou, BBox};
use crate::error::{Error, Result};
use crate::eval::{evaluate_map, GroundTruth, ImageDetection};
use crate::head::decode_offsets;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

pub const DEFAULT_NMS_THRESH: f64 = 0.4;
pub const DEFAULT_VOTE_THRESH: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Suppression priority: score descending, then box x, y, w, h ascending.
pub fn priority(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x.total_cmp(&b.bbox.x))
        .then(a.bbox.y.total_cmp(&b.bbox.y))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
}

/// Greedy per-class non-maximum suppression: keeps the highest-priority
/// detection and drops same-class detections overlapping it by more than
/// `thresh`, repeatedly. Output is in priority order.
pub fn nms(dets: &[Detection], thresh: f64) -> Vec<Detection> {
    let mut order: Vec<Detection> = dets.to_vec();
    order.sort_by(priority);
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Replaces each kept box with the score-weighted mean of the same-class
/// `pool` boxes overlapping it by at least `iou_thresh`. The kept box always
/// votes for itself. Averaging corners and averaging center/size are the
/// same linear map, so the mean is taken in center form around the peak.
pub fn box_voting(kept: &[Detection], pool: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    kept.iter()
        .map(|k| {
            let mut voters: Vec<&Detection> = pool
                .iter()
                .filter(|p| p.class_id == k.class_id && iou(&p.bbox, &k.bbox) >= iou_thresh)
                .collect();
            if !voters.iter().any(|p| *p == k) {
                voters.push(k);
            }
            let total: f64 = voters.iter().map(|p| p.score).sum();
            if voters.len() == 1 || total <= 0.0 {
                return *k;
            }
            let mut delta = [0.0; 4];
            for p in &voters {
                let d = [p.bbox.x - k.bbox.x, p.bbox.y - k.bbox.y, p.bbox.w - k.bbox.w, p.bbox.h - k.bbox.h];
                for (acc, v) in delta.iter_mut().zip(d) {
                    *acc += p.score * v;
                }
            }
            Detection {
                bbox: BBox {
                    x: k.bbox.x + delta[0] / total,
                    y: k.bbox.y + delta[1] / total,
                    w: k.bbox.w + delta[2] / total,
                    h: k.bbox.h + delta[3] / total,
                },
                ..*k
            }
        })
        .collect()
}

/// Aligned scores and boxes for a list of candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredBoxes {
    pub scores: Vec<f64>,
    pub boxes: Vec<BBox>,
}

/// Averages the original pass with the mirrored pass; mirrored boxes are
/// mapped back before averaging.
pub fn fuse_flip(orig: &ScoredBoxes, flipped: &ScoredBoxes, image_w: usize) -> Result<ScoredBoxes> {
    let n = orig.scores.len();
    if orig.boxes.len() != n || flipped.scores.len() != n || flipped.boxes.len() != n {
        return Err(Error::Contract(format!(
            "flip fusion of {}/{} and {}/{} entries",
            orig.scores.len(),
            orig.boxes.len(),
            flipped.scores.len(),
            flipped.boxes.len()
        )));
    }
    let scores = orig
        .scores
        .iter()
        .zip(&flipped.scores)
        .map(|(a, b)| if a == b { *a } else { 0.5 * (a + b) })
        .collect();
    let boxes = orig
        .boxes
        .iter()
        .zip(&flipped.boxes)
        .map(|(a, b)| {
            let b = flip_box(b, image_w);
            let mean = |p: f64, q: f64| if p == q { p } else { 0.5 * (p + q) };
            BBox {
                x: mean(a.x, b.x),
                y: mean(a.y, b.y),
                w: mean(a.w, b.w),
                h: mean(a.h, b.h),
            }
        })
        .collect();
    Ok(ScoredBoxes { scores, boxes })
}

/// `(1 - w) * det + w * image`, per class.
pub fn fuse_context(det_scores: &[f64], image_scores: &[f64], w: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Domain(format!("context weight {w} outside [0, 1]")));
    }
    if det_scores.len() != image_scores.len() {
        return Err(Error::Contract("context fusion length mismatch".into()));
    }
    Ok(det_scores
        .iter()
        .zip(image_scores)
        .map(|(&d, &i)| {
            if w == 0.0 {
                d
            } else if w == 1.0 {
                i
            } else {
                (1.0 - w) * d + w * i
            }
        })
        .collect())
}

/// Raw per-candidate outputs of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub num_classes: usize,
    /// `(image_id, proposal)` per candidate.
    pub candidates: Vec<(usize, BBox)>,
    /// `(K + 1)` class probabilities per candidate.
    pub scores: Vec<f64>,
    /// `4K` offsets per candidate.
    pub offsets: Vec<f64>,
}

impl ModelOutput {
    fn check(&self) -> Result<()> {
        let n = self.candidates.len();
        if self.scores.len() != n * (self.num_classes + 1) || self.offsets.len() != n * 4 * self.num_classes {
            return Err(Error::Contract("model output buffers do not match candidates".into()));
        }
        Ok(())
    }

    /// Per-class detections (decoded boxes) after per-image NMS.
    pub fn detections(&self, nms_thresh: f64) -> Result<Vec<ImageDetection>> {
        self.check()?;
        let k = self.num_classes;
        let mut by_image: std::collections::BTreeMap<usize, Vec<Detection>> = Default::default();
        for (r, (image_id, proposal)) in self.candidates.iter().enumerate() {
            for c in 1..=k {
                let t: [f64; 4] = self.offsets[r * 4 * k + 4 * (c - 1)..r * 4 * k + 4 * c]
                    .try_into()
                    .expect("four offsets");
                let bbox = decode_offsets(proposal, &t)?;
                by_image.entry(*image_id).or_default().push(Detection {
                    bbox,
                    class_id: c,
                    score: self.scores[r * (k + 1) + c],
                });
            }
        }
        Ok(by_image
            .into_iter()
            .flat_map(|(image_id, dets)| {
                nms(&dets, nms_thresh)
                    .into_iter()
                    .map(move |detection| ImageDetection { image_id, detection })
            })
            .collect())
    }
}

/// Arithmetic mean of scores and offsets across models with identical
/// candidate lists.
pub fn ensemble_average(models: &[&ModelOutput]) -> Result<ModelOutput> {
    let Some(first) = models.first() else {
        return Err(Error::Contract("empty ensemble".into()));
    };
    for m in models {
        m.check()?;
        if m.candidates != first.candidates || m.num_classes != first.num_classes {
            return Err(Error::Contract("ensemble members have misaligned candidates".into()));
        }
    }
    if models.len() == 1 {
        return Ok((*first).clone());
    }
    let n = models.len() as f64;
    let mean = |get: fn(&ModelOutput) -> &Vec<f64>| -> Vec<f64> {
        (0..get(first).len())
            .map(|i| models.iter().map(|m| get(m)[i]).sum::<f64>() / n)
            .collect()
    };
    Ok(ModelOutput {
        num_classes: first.num_classes,
        candidates: first.candidates.clone(),
        scores: mean(|m| &m.scores),
        offsets: mean(|m| &m.offsets),
    })
}

/// Forward greedy subset selection. Starting from the empty set, repeatedly
/// adds the candidate that maximises `score` of the enlarged set; stops when
/// no addition strictly improves or `k_max` members are chosen. Ties go to
/// the lower index. The empty set scores 0.
pub fn greedy_select(num_candidates: usize, k_max: usize, mut score: impl FnMut(&[usize]) -> f64) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::new();
    let mut current = 0.0;
    while chosen.len() < k_max {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..num_candidates).filter(|i| !chosen.contains(i)) {
            let mut trial = chosen.clone();
            trial.push(i);
            let s = score(&trial);
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        match best {
            Some((i, s)) if s > current => {
                chosen.push(i);
                current = s;
            }
            _ => break,
        }
    }
    chosen
}

/// Greedy ensemble selection by validation mAP of the averaged outputs.
pub fn greedy_model_select(
    candidates: &[ModelOutput],
    val: &[GroundTruth],
    k_max: usize,
    nms_thresh: f64,
) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::Contract("no candidate models".into()));
    }
    let mut failure = None;
    let chosen = greedy_select(candidates.len(), k_max, |subset| {
        let members: Vec<&ModelOutput> = subset.iter().map(|&i| &candidates[i]).collect();
        let score = ensemble_average(&members)
            .and_then(|avg| avg.detections(nms_thresh))
            .map(|dets| evaluate_map(&dets, val, 0.5).map);
        match score {
            Ok(s) => s,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NEG_INFINITY
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(chosen),
    }
}
