//! Mean average precision and false-positive type analysis.

use crate::boxes::{iou, BBox};
use crate::postprocess::Detection;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeMap;

pub const DEFAULT_MATCH_IOU: f64 = 0.5;
/// Minimum overlap for a false positive to count as touching an object.
pub const FP_TOUCH_IOU: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDetection {
    pub image_id: usize,
    pub detection: Detection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FpFractions {
    pub loc: f64,
    pub other: f64,
    pub bg: f64,
    /// Number of false positives classified.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map: f64,
    pub fp_fractions: FpFractions,
}

/// Ranking used everywhere in evaluation: score descending, then image id,
/// then box coordinates. Total, so results do not depend on input order.
fn rank(a: &ImageDetection, b: &ImageDetection) -> Ordering {
    let (da, db) = (&a.detection, &b.detection);
    db.score
        .total_cmp(&da.score)
        .then(a.image_id.cmp(&b.image_id))
        .then(da.class_id.cmp(&db.class_id))
        .then(da.bbox.x.total_cmp(&db.bbox.x))
        .then(da.bbox.y.total_cmp(&db.bbox.y))
        .then(da.bbox.w.total_cmp(&db.bbox.w))
        .then(da.bbox.h.total_cmp(&db.bbox.h))
}

/// Greedy matching in rank order; each detection takes the unmatched
/// same-class GT of its image with the largest IoU ≥ `thresh` (lowest index
/// on ties). Returns the ranked detections and their TP flags.
fn match_ranked(dets: &[ImageDetection], gts: &[GroundTruth], thresh: f64) -> (Vec<ImageDetection>, Vec<bool>) {
    let mut ranked = dets.to_vec();
    ranked.sort_by(rank);
    let mut taken = vec![false; gts.len()];
    let tp = ranked
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.image_id != d.image_id || g.class_id != d.detection.class_id {
                    continue;
                }
                let o = iou(&g.bbox, &d.detection.bbox);
                if o >= thresh && best.map_or(true, |(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (ranked, tp)
}

/// All-points average precision from TP flags in rank order.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Per-class AP and their mean over classes that have at least one GT.
pub fn evaluate_map(dets: &[ImageDetection], gts: &[GroundTruth], iou_thresh: f64) -> MapResult {
    let mut classes: BTreeMap<usize, usize> = BTreeMap::new();
    for g in gts {
        *classes.entry(g.class_id).or_default() += 1;
    }
    let (ranked, tp) = match_ranked(dets, gts, iou_thresh);
    let per_class_ap: BTreeMap<usize, f64> = classes
        .iter()
        .map(|(&c, &n)| {
            let flags: Vec<bool> = ranked
                .iter()
                .zip(&tp)
                .filter(|(d, _)| d.detection.class_id == c)
                .map(|(_, &t)| t)
                .collect();
            (c, average_precision(&flags, n))
        })
        .collect();
    let map = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    MapResult { per_class_ap, map }
}

/// Splits the false positives among the top `score_top_fraction` of ranked
/// detections into localization, cross-class and background errors.
/// A false positive touching a same-class GT (IoU ≥ 0.1) counts as Loc,
/// including duplicates of an already matched object.
pub fn fp_analysis(dets: &[ImageDetection], gts: &[GroundTruth], iou_thresh: f64, score_top_fraction: f64) -> FpFractions {
    let (ranked, tp) = match_ranked(dets, gts, iou_thresh);
    let top = ((ranked.len() as f64) * score_top_fraction.clamp(0.0, 1.0)).ceil() as usize;
    let (mut loc, mut other, mut bg) = (0usize, 0usize, 0usize);
    for (d, _) in ranked.iter().zip(&tp).take(top).filter(|(_, &t)| !t) {
        let mut same: f64 = 0.0;
        let mut diff: f64 = 0.0;
        for g in gts.iter().filter(|g| g.image_id == d.image_id) {
            let o = iou(&g.bbox, &d.detection.bbox);
            if g.class_id == d.detection.class_id {
                same = same.max(o);
            } else {
                diff = diff.max(o);
            }
        }
        if same >= FP_TOUCH_IOU {
            loc += 1;
        } else if diff >= FP_TOUCH_IOU {
            other += 1;
        } else {
            bg += 1;
        }
    }
    let count = loc + other + bg;
    if count == 0 {
        return FpFractions::default();
    }
    let n = count as f64;
    FpFractions {
        loc: loc as f64 / n,
        other: other as f64 / n,
        bg: bg as f64 / n,
        count,
    }
}

/// `evaluate_map` plus `fp_analysis` in one result.
pub fn evaluate(dets: &[ImageDetection], gts: &[GroundTruth], iou_thresh: f64, score_top_fraction: f64) -> EvalResult {
    let m = evaluate_map(dets, gts, iou_thresh);
    EvalResult {
        per_class_ap: m.per_class_ap,
        map: m.map,
        fp_fractions: fp_analysis(dets, gts, iou_thresh, score_top_fraction),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> BBox {
        BBox::new(x, 10.0, 10.0, 10.0).unwrap()
    }

    fn d(image_id: usize, x: f64, class_id: usize, score: f64) -> ImageDetection {
        ImageDetection {
            image_id,
            detection: Detection { bbox: b(x), class_id, score },
        }
    }

    fn gt(image_id: usize, x: f64, class_id: usize) -> GroundTruth {
        GroundTruth { image_id, class_id, bbox: b(x) }
    }

    #[test]
    fn perfect_and_missed() {
        // shift 10 * (1 - 0.7) / 1.7 keeps IoU 0.7
        let shift = 10.0 * 0.3 / 1.7;
        assert!((iou(&b(0.0), &b(shift)) - 0.7).abs() < 1e-12);
        let r = evaluate_map(&[d(0, shift, 1, 0.9)], &[gt(0, 0.0, 1)], 0.5);
        assert_eq!(r.map, 1.0);
        let shift = 10.0 * 0.7 / 1.3;
        assert!((iou(&b(0.0), &b(shift)) - 0.3).abs() < 1e-12);
        assert_eq!(evaluate_map(&[d(0, shift, 1, 0.9)], &[gt(0, 0.0, 1)], 0.5).map, 0.0);
    }

    #[test]
    fn mixed_case() {
        // ranked: TP, FP, TP with 2 GT -> PR points (0.5, 1), (0.5, 0.5), (1, 2/3)
        let dets = [d(0, 0.0, 1, 0.9), d(0, 40.0, 1, 0.8), d(0, 100.0, 1, 0.7)];
        let gts = [gt(0, 0.0, 1), gt(0, 100.0, 1)];
        let r = evaluate_map(&dets, &gts, 0.5);
        assert!((r.map - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn duplicates_are_false_positives() {
        let dets = [d(0, 0.0, 1, 0.9), d(0, 0.5, 1, 0.8)];
        let r = evaluate_map(&dets, &[gt(0, 0.0, 1)], 0.5);
        assert_eq!(r.map, 1.0);
        let f = fp_analysis(&dets, &[gt(0, 0.0, 1)], 0.5, 1.0);
        assert_eq!((f.loc, f.count), (1.0, 1));
    }

    #[test]
    fn classes_without_gt_are_ignored() {
        let r = evaluate_map(&[d(0, 0.0, 1, 0.9), d(0, 50.0, 2, 0.9)], &[gt(0, 0.0, 1)], 0.5);
        assert_eq!(r.per_class_ap.len(), 1);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn fp_taxonomy() {
        let shift = 10.0 * 0.7 / 1.3; // IoU 0.3
        let f = fp_analysis(&[d(0, shift, 1, 0.9)], &[gt(0, 0.0, 1)], 0.5, 1.0);
        assert_eq!((f.loc, f.other, f.bg), (1.0, 0.0, 0.0));
        let f = fp_analysis(&[d(0, 80.0, 1, 0.9)], &[gt(0, 0.0, 1)], 0.5, 1.0);
        assert_eq!((f.loc, f.other, f.bg), (0.0, 0.0, 1.0));
        let shift = 10.0 * 0.6 / 1.4; // IoU 0.4
        let f = fp_analysis(&[d(0, shift, 1, 0.9)], &[gt(0, 0.0, 2)], 0.5, 1.0);
        assert_eq!((f.loc, f.other, f.bg), (0.0, 1.0, 0.0));
        assert_eq!(fp_analysis(&[], &[gt(0, 0.0, 2)], 0.5, 1.0).count, 0);
    }
}
