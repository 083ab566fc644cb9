//! Test-time pipeline: scoring, flip and pyramid passes, NMS, box voting,
//! context fusion, and dataset-level evaluation.

use super::config::{JitterSpec, RunConfig};
use super::data::{Dataset, SyntheticScene};
use super::model::{Model, RawScores};
use super::proposals::gen_proposals;
use crate::boxes::{flip_box, pyramid_scale_select, BBox};
use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_map, EvalResult, ImageDetection};
use crate::head::{decode_offsets, TRUNK_STRIDE};
use crate::postprocess::{box_voting, fuse_context, fuse_flip, nms, Detection, ModelOutput, ScoredBoxes, DEFAULT_VOTE_THRESH};
use crate::tensor::{Shape, Tensor};
use serde::{Deserialize, Serialize};
use std::io::{BufWriter, Write};
use std::path::Path;

/// Seed of the proposals used for evaluation, shared by every model so that
/// candidate lists align.
pub const EVAL_PROPOSAL_SEED: u64 = 0x5eed_e7a1;
/// Fraction of ranked detections inspected by the false-positive analysis.
pub const FP_TOP_FRACTION: f64 = 0.25;
/// Candidate context weights: 0, 0.05, ..., 1.
pub const CONTEXT_WEIGHT_STEPS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferOptions {
    pub flip: bool,
    pub pyramid: bool,
    pub nms_thresh: f64,
    pub box_voting: bool,
    /// Global context fusion weight, if fusion is on.
    pub context_weight: Option<f64>,
}

impl InferOptions {
    /// Everything off except NMS.
    pub fn raw(nms_thresh: f64) -> Self {
        Self {
            flip: false,
            pyramid: false,
            nms_thresh,
            box_voting: false,
            context_weight: None,
        }
    }

    pub fn from_config(c: &RunConfig) -> Self {
        Self {
            flip: c.flip,
            pyramid: false,
            nms_thresh: c.nms_thresh,
            box_voting: c.box_voting,
            context_weight: None,
        }
    }
}

/// Mirror in the continuous pixel frame, where pixel `i` covers `[i, i + 1)`.
pub fn mirror_box(b: &BBox, image_w: usize) -> BBox {
    flip_box(b, image_w + 1)
}

/// Bilinear resize with pixel-area alignment.
pub fn resize_bilinear(image: &Tensor, new_w: usize, new_h: usize) -> Tensor {
    let s = image.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, new_h, new_w));
    let (sx, sy) = (s.w as f64 / new_w as f64, s.h as f64 / new_h as f64);
    let coord = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..new_h {
                let (y0, y1, fy) = coord(y, sy, s.h);
                for x in 0..new_w {
                    let (x0, x1, fx) = coord(x, sx, s.w);
                    let top = image.at(n, c, y0, x0) * (1.0 - fx) + image.at(n, c, y0, x1) * fx;
                    let bottom = image.at(n, c, y1, x0) * (1.0 - fx) + image.at(n, c, y1, x1) * fx;
                    out.set(n, c, y, x, top * (1.0 - fy) + bottom * fy);
                }
            }
        }
    }
    out
}

/// Box area at which each roi bin covers two trunk cells per side.
pub fn canonical_area(roi_out: usize) -> f64 {
    let side = (2 * TRUNK_STRIDE * roi_out) as f64;
    side * side
}

/// Raw scores, optionally evaluating each box on the pyramid level that
/// brings it closest to the canonical size.
pub fn score_boxes(model: &Model, image: &Tensor, boxes: &[BBox], pyramid: bool) -> Result<RawScores> {
    let scales = &model.config.pyramid_scales;
    if !pyramid || scales.len() == 1 {
        return model.predict(image, boxes);
    }
    let s = image.shape();
    let short = s.w.min(s.h) as f64;
    let area = canonical_area(model.config.roi_out);
    let level: Vec<usize> = boxes.iter().map(|b| pyramid_scale_select(b, scales, short, area)).collect();
    let k = model.num_classes;
    let mut probs = vec![0.0; boxes.len() * (k + 1)];
    let mut offsets = vec![0.0; boxes.len() * 4 * k];
    for (li, &target) in scales.iter().enumerate() {
        let rows: Vec<usize> = (0..boxes.len()).filter(|&r| level[r] == li).collect();
        if rows.is_empty() {
            continue;
        }
        let f = target / short;
        let (w, h) = (((s.w as f64) * f).round().max(1.0), ((s.h as f64) * f).round().max(1.0));
        let resized = resize_bilinear(image, w as usize, h as usize);
        let (fx, fy) = (w / s.w as f64, h / s.h as f64);
        let scaled: Vec<BBox> = rows
            .iter()
            .map(|&r| {
                let b = boxes[r];
                BBox { x: b.x * fx, y: b.y * fy, w: b.w * fx, h: b.h * fy }
            })
            .collect();
        let raw = model.predict(&resized, &scaled)?;
        for (i, &r) in rows.iter().enumerate() {
            probs[r * (k + 1)..(r + 1) * (k + 1)].copy_from_slice(&raw.probs[i * (k + 1)..(i + 1) * (k + 1)]);
            offsets[r * 4 * k..(r + 1) * 4 * k].copy_from_slice(&raw.offsets[i * 4 * k..(i + 1) * 4 * k]);
        }
    }
    Ok(RawScores { probs, offsets })
}

/// One `(score, decoded box)` per proposal and foreground class, proposal
/// major.
pub fn decode(boxes: &[BBox], raw: &RawScores, num_classes: usize) -> Result<ScoredBoxes> {
    let k = num_classes;
    let mut out = ScoredBoxes {
        scores: Vec::with_capacity(boxes.len() * k),
        boxes: Vec::with_capacity(boxes.len() * k),
    };
    for (r, b) in boxes.iter().enumerate() {
        for c in 1..=k {
            let t: [f64; 4] = raw.offsets[r * 4 * k + 4 * (c - 1)..r * 4 * k + 4 * c].try_into().expect("four offsets");
            out.scores.push(raw.probs[r * (k + 1) + c]);
            out.boxes.push(decode_offsets(b, &t)?);
        }
    }
    Ok(out)
}

/// Foreground probabilities of the whole image seen as one box, indexed by
/// class id (entry 0 is background).
pub fn image_scores(model: &Model, image: &Tensor) -> Result<Vec<f64>> {
    let s = image.shape();
    let whole = BBox::new(0.5 * s.w as f64, 0.5 * s.h as f64, s.w as f64, s.h as f64)?;
    Ok(model.predict(image, &[whole])?.probs)
}

/// Detections before context fusion.
pub fn detect_local(model: &Model, image: &Tensor, proposals: &[BBox], opts: &InferOptions) -> Result<Vec<Detection>> {
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let k = model.num_classes;
    let raw = score_boxes(model, image, proposals, opts.pyramid)?;
    let mut scored = decode(proposals, &raw, k)?;
    if opts.flip {
        let w = image.shape().w;
        let mirrored: Vec<BBox> = proposals.iter().map(|b| mirror_box(b, w)).collect();
        let flipped = image.flip_horizontal();
        let fraw = score_boxes(model, &flipped, &mirrored, opts.pyramid)?;
        // fuse_flip maps boxes back with flip_box(., w + 1), i.e. the mirror above.
        scored = fuse_flip(&scored, &decode(&mirrored, &fraw, k)?, w + 1)?;
    }
    let pool: Vec<Detection> = scored
        .scores
        .iter()
        .zip(&scored.boxes)
        .enumerate()
        .map(|(i, (&score, &bbox))| Detection {
            bbox,
            class_id: i % k + 1,
            score,
        })
        .collect();
    let kept = nms(&pool, opts.nms_thresh);
    Ok(if opts.box_voting {
        box_voting(&kept, &pool, DEFAULT_VOTE_THRESH)
    } else {
        kept
    })
}

pub fn apply_context(dets: &[Detection], image_scores: &[f64], w: f64) -> Result<Vec<Detection>> {
    dets.iter()
        .map(|d| {
            let img = *image_scores
                .get(d.class_id)
                .ok_or_else(|| Error::Index(format!("no image score for class {}", d.class_id)))?;
            Ok(Detection {
                score: fuse_context(&[d.score], &[img], w)?[0],
                ..*d
            })
        })
        .collect()
}

/// Full pipeline on one image.
pub fn detect(model: &Model, image: &Tensor, proposals: &[BBox], opts: &InferOptions) -> Result<Vec<Detection>> {
    let dets = detect_local(model, image, proposals, opts)?;
    match opts.context_weight {
        Some(w) if !dets.is_empty() => apply_context(&dets, &image_scores(model, image)?, w),
        _ => Ok(dets),
    }
}

fn proposal_seed(id: usize) -> u64 {
    EVAL_PROPOSAL_SEED ^ (id as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// The fixed evaluation proposals of a scene.
pub fn eval_proposals(scene: &SyntheticScene, spec: &JitterSpec) -> Result<Vec<BBox>> {
    let s = scene.image.shape();
    Ok(gen_proposals(&scene.objects, spec, s.w, s.h, proposal_seed(scene.id))?
        .into_iter()
        .map(|p| p.bbox)
        .collect())
}

pub fn detect_dataset(model: &Model, data: &Dataset, opts: &InferOptions) -> Result<Vec<ImageDetection>> {
    let mut out = Vec::new();
    for scene in &data.scenes {
        let proposals = eval_proposals(scene, &model.config.proposals)?;
        for detection in detect(model, &scene.image, &proposals, opts)? {
            out.push(ImageDetection {
                image_id: scene.id,
                detection,
            });
        }
    }
    Ok(out)
}

pub fn evaluate_model(model: &Model, data: &Dataset, opts: &InferOptions) -> Result<(EvalResult, Vec<ImageDetection>)> {
    let dets = detect_dataset(model, data, opts)?;
    Ok((evaluate(&dets, &data.ground_truth(), 0.5, FP_TOP_FRACTION), dets))
}

/// Raw per-proposal outputs on the evaluation proposals, for ensembling.
pub fn model_output(model: &Model, data: &Dataset) -> Result<ModelOutput> {
    let mut out = ModelOutput {
        num_classes: model.num_classes,
        candidates: Vec::new(),
        scores: Vec::new(),
        offsets: Vec::new(),
    };
    for scene in &data.scenes {
        let proposals = eval_proposals(scene, &model.config.proposals)?;
        let raw = model.predict(&scene.image, &proposals)?;
        out.candidates.extend(proposals.iter().map(|b| (scene.id, *b)));
        out.scores.extend(raw.probs);
        out.offsets.extend(raw.offsets);
    }
    Ok(out)
}

/// Global context weight in `{0, 0.05, ..., 1}` maximising mAP on `data`;
/// ties keep the smaller weight.
pub fn search_context_weight(model: &Model, data: &Dataset, opts: &InferOptions) -> Result<f64> {
    let mut cached = Vec::with_capacity(data.scenes.len());
    for scene in &data.scenes {
        let proposals = eval_proposals(scene, &model.config.proposals)?;
        let local = InferOptions {
            context_weight: None,
            ..*opts
        };
        let dets = detect_local(model, &scene.image, &proposals, &local)?;
        cached.push((scene.id, dets, image_scores(model, &scene.image)?));
    }
    let gts = data.ground_truth();
    let mut best = (0.0, f64::NEG_INFINITY);
    for step in 0..=CONTEXT_WEIGHT_STEPS {
        let w = step as f64 / CONTEXT_WEIGHT_STEPS as f64;
        let mut all = Vec::new();
        for (image_id, dets, img) in &cached {
            for detection in apply_context(dets, img, w)? {
                all.push(ImageDetection {
                    image_id: *image_id,
                    detection,
                });
            }
        }
        let m = evaluate_map(&all, &gts, 0.5).map;
        if m > best.1 {
            best = (w, m);
        }
    }
    Ok(best.0)
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    image_id: usize,
    class_id: usize,
    score: f64,
    #[serde(rename = "box")]
    corners: [f64; 4],
}

/// JSON lines `{image_id, class_id, score, box: [x1, y1, x2, y2]}`.
pub fn write_detections(path: &Path, dets: &[ImageDetection]) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    write_detection_lines(&mut f, dets)?;
    f.flush()?;
    Ok(())
}

pub fn write_detection_lines(out: &mut impl Write, dets: &[ImageDetection]) -> Result<()> {
    for d in dets {
        let r = DetectionRecord {
            image_id: d.image_id,
            class_id: d.detection.class_id,
            score: d.detection.score,
            corners: d.detection.bbox.corners(),
        };
        writeln!(out, "{}", serde_json::to_string(&r)?)?;
    }
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<Vec<ImageDetection>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let r: DetectionRecord = serde_json::from_str(l)?;
            Ok(ImageDetection {
                image_id: r.image_id,
                detection: Detection {
                    bbox: BBox::from_corners(r.corners)?,
                    class_id: r.class_id,
                    score: r.score,
                },
            })
        })
        .collect()
}

const DRAW_COLORS: [[f64; 3]; 6] = [
    [1.0, 0.2, 0.2],
    [0.2, 1.0, 0.2],
    [0.2, 0.4, 1.0],
    [1.0, 1.0, 0.2],
    [1.0, 0.2, 1.0],
    [0.2, 1.0, 1.0],
];

/// Copy of `image` with a one-pixel outline around each detection.
pub fn draw_detections(image: &Tensor, dets: &[Detection]) -> Tensor {
    let mut out = image.clone();
    let s = image.shape();
    for d in dets {
        let color = DRAW_COLORS[(d.class_id + DRAW_COLORS.len() - 1) % DRAW_COLORS.len()];
        let [x1, y1, x2, y2] = d.bbox.corners();
        let clampx = |v: f64| (v.floor().max(0.0) as usize).min(s.w - 1);
        let clampy = |v: f64| (v.floor().max(0.0) as usize).min(s.h - 1);
        let (x1, x2, y1, y2) = (clampx(x1), clampx(x2 - 1e-9), clampy(y1), clampy(y2 - 1e-9));
        for x in x1..=x2 {
            for y in [y1, y2] {
                (0..3).for_each(|c| out.set(0, c, y, x, color[c]));
            }
        }
        for y in y1..=y2 {
            for x in [x1, x2] {
                (0..3).for_each(|c| out.set(0, c, y, x, color[c]));
            }
        }
    }
    out
}
