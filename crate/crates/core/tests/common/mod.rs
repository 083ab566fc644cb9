//! Slow, independently formulated references for the hand-written kernels
//! and the randomized comparisons against them.

#![allow(dead_code)]

use gbdnet::autograd::Graph;
use gbdnet::boxes::{iou, BBox};
use gbdnet::eval::{evaluate_map, GroundTruth, ImageDetection};
use gbdnet::postprocess::{box_voting, ensemble_average, greedy_model_select, greedy_select, nms, priority, Detection, ModelOutput};
use gbdnet::roi::{roi_max_pool, FeatureRegion};
use gbdnet::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

pub const INSTANCES: u64 = 200;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_box(r: &mut ChaCha8Rng, span: f64) -> BBox {
    BBox::new(r.gen_range(0.0..span), r.gen_range(0.0..span), r.gen_range(2.0..12.0), r.gen_range(2.0..12.0)).unwrap()
}

/// Reference pooling: cell `x` belongs to bin `i` when it lies between the
/// rounded fractional edges `i * len / bins`.
pub fn pool_reference(t: &Tensor, r: &FeatureRegion, oh: usize, ow: usize) -> Vec<f64> {
    let s = t.shape();
    let edges = |start: usize, len: usize, bins: usize, i: usize| {
        let lo = ((i * len) as f64 / bins as f64).round() as usize;
        let hi = (((i + 1) * len) as f64 / bins as f64).round() as usize;
        if hi > lo {
            (start + lo, start + hi)
        } else if lo < len {
            (start + lo, start + lo + 1)
        } else {
            (start + len - 1, start + len)
        }
    };
    let mut out = Vec::new();
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..oh {
                let (ya, yb) = edges(r.y0, r.y1 - r.y0, oh, i);
                for j in 0..ow {
                    let (xa, xb) = edges(r.x0, r.x1 - r.x0, ow, j);
                    let mut m = f64::NEG_INFINITY;
                    for y in ya..yb {
                        for x in xa..xb {
                            m = m.max(t.at(n, c, y, x));
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

pub fn roi_max_pool_matches_reference() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (h, w) = (r.gen_range(1..12), r.gen_range(1..12));
        let shape = Shape::new(r.gen_range(1..3), r.gen_range(1..3), h, w);
        let t = Tensor::from_vec(shape, (0..shape.numel()).map(|_| r.gen_range(-5.0..5.0)).collect()).unwrap();
        let x0 = r.gen_range(0..w);
        let y0 = r.gen_range(0..h);
        let region = FeatureRegion { x0, y0, x1: r.gen_range(x0 + 1..=w), y1: r.gen_range(y0 + 1..=h) };
        let (oh, ow) = (r.gen_range(1..6), r.gen_range(1..6));
        let got = roi_max_pool(&t, &region, oh, ow).unwrap();
        assert_eq!(got.data(), pool_reference(&t, &region, oh, ow).as_slice(), "seed {seed}");

        // the graph op pools identically
        let mut g = Graph::new();
        let v = g.leaf(t.clone());
        let rois: Vec<_> = (0..shape.n).map(|i| (i, region)).collect();
        let p = g.roi_pool(v, &rois, oh, ow).unwrap();
        assert_eq!(g.value(p).data(), got.data(), "seed {seed}");
    }
}

pub fn random_dets(r: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| Detection {
            bbox: random_box(r, 20.0),
            class_id: r.gen_range(1..3),
            // coarse scores so priority ties on score happen
            score: f64::from(r.gen_range(0..5)) / 4.0,
        })
        .collect()
}

/// The greedy result is the unique subset in which no two kept same-class
/// boxes overlap more than `t` and every dropped box overlaps a kept box of
/// higher priority. Found here by enumerating all subsets.
pub fn nms_exhaustive(dets: &[Detection], t: f64) -> Vec<Detection> {
    let n = dets.len();
    let overlap = |a: &Detection, b: &Detection| a.class_id == b.class_id && iou(&a.bbox, &b.bbox) > t;
    let mut solutions = Vec::new();
    for mask in 0u32..(1 << n) {
        let kept: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let independent = kept.iter().all(|&i| kept.iter().all(|&j| i == j || !overlap(&dets[i], &dets[j])));
        let covered = (0..n)
            .filter(|i| mask >> i & 1 == 0)
            .all(|i| kept.iter().any(|&k| overlap(&dets[k], &dets[i]) && priority(&dets[k], &dets[i]).is_lt()));
        if independent && covered {
            solutions.push(kept);
        }
    }
    assert_eq!(solutions.len(), 1, "greedy suppression has a unique fixed point");
    let mut out: Vec<Detection> = solutions[0].iter().map(|&i| dets[i]).collect();
    out.sort_by(priority);
    out
}

pub fn nms_matches_exhaustive_search() {
    for seed in 0..INSTANCES {
        let mut r = rng(1000 + seed);
        let n = r.gen_range(0..=9);
        let dets = random_dets(&mut r, n);
        let t = [0.0, 0.3, 0.4, 0.5, 0.7][r.gen_range(0..5)];
        assert_eq!(nms(&dets, t), nms_exhaustive(&dets, t), "seed {seed}");
    }
}

pub fn box_voting_matches_corner_average() {
    for seed in 0..INSTANCES {
        let mut r = rng(2000 + seed);
        let n = r.gen_range(1..10);
        let mut pool = random_dets(&mut r, n);
        for d in &mut pool {
            d.score = r.gen_range(0.01..1.0);
        }
        let kept = nms(&pool, 0.4);
        let voted = box_voting(&kept, &pool, 0.5);
        for (k, v) in kept.iter().zip(&voted) {
            let voters: Vec<&Detection> = pool
                .iter()
                .filter(|p| p.class_id == k.class_id && iou(&p.bbox, &k.bbox) >= 0.5)
                .collect();
            let total: f64 = voters.iter().map(|p| p.score).sum();
            let mut c = [0.0; 4];
            for p in &voters {
                for (acc, x) in c.iter_mut().zip(p.bbox.corners()) {
                    *acc += p.score * x / total;
                }
            }
            let want = BBox::from_corners(c).unwrap();
            for (a, b) in [(v.bbox.x, want.x), (v.bbox.y, want.y), (v.bbox.w, want.w), (v.bbox.h, want.h)] {
                assert!((a - b).abs() < 1e-9, "seed {seed}: {v:?} vs {want:?}");
            }
            assert_eq!((v.score, v.class_id), (k.score, k.class_id));
        }
    }
}

/// AP from scratch: for every prefix of the ranked list, re-match from
/// nothing and read off precision and recall; precision is interpolated as
/// the best precision at any recall at least as large.
pub fn ap_reference(ranked: &[ImageDetection], gts: &[GroundTruth], class: usize) -> f64 {
    let gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == class).collect();
    let dets: Vec<&ImageDetection> = ranked.iter().filter(|d| d.detection.class_id == class).collect();
    let mut points = Vec::new();
    for k in 1..=dets.len() {
        let mut used = vec![false; gts.len()];
        let mut tp = 0;
        for d in &dets[..k] {
            let mut best: Option<usize> = None;
            for (j, g) in gts.iter().enumerate() {
                let o = iou(&g.bbox, &d.detection.bbox);
                if !used[j] && g.image_id == d.image_id && o >= 0.5 && best.map_or(true, |b| o > iou(&gts[b].bbox, &d.detection.bbox)) {
                    best = Some(j);
                }
            }
            if let Some(j) = best {
                used[j] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / k as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for &(rec, _) in &points {
        if rec > prev {
            let p = points.iter().filter(|(r2, _)| *r2 >= rec).map(|(_, p)| *p).fold(0.0, f64::max);
            ap += (rec - prev) * p;
            prev = rec;
        }
    }
    ap
}

pub fn map_matches_prefix_reference() {
    for seed in 0..INSTANCES {
        let mut r = rng(3000 + seed);
        let mut gts = Vec::new();
        for image_id in 0..r.gen_range(1..4) {
            for _ in 0..r.gen_range(0..4) {
                gts.push(GroundTruth { image_id, class_id: r.gen_range(1..4), bbox: random_box(&mut r, 30.0) });
            }
        }
        let mut dets = Vec::new();
        for g in &gts {
            for _ in 0..r.gen_range(0..3) {
                let b = g.bbox;
                let bbox = BBox::new(b.x + r.gen_range(-1.5..1.5), b.y + r.gen_range(-1.5..1.5), b.w, b.h).unwrap();
                let class_id = if r.gen_bool(0.8) { g.class_id } else { r.gen_range(1..4) };
                dets.push(ImageDetection { image_id: g.image_id, detection: Detection { bbox, class_id, score: r.gen() } });
            }
        }
        for _ in 0..r.gen_range(0..4) {
            let image_id = r.gen_range(0..3);
            dets.push(ImageDetection { image_id, detection: Detection { bbox: random_box(&mut r, 30.0), class_id: r.gen_range(1..4), score: r.gen() } });
        }
        let res = evaluate_map(&dets, &gts, 0.5);
        let mut ranked = dets.clone();
        ranked.sort_by(|a, b| b.detection.score.total_cmp(&a.detection.score));
        let classes: BTreeSet<usize> = gts.iter().map(|g| g.class_id).collect();
        assert_eq!(res.per_class_ap.keys().copied().collect::<BTreeSet<_>>(), classes);
        let mut sum = 0.0;
        for &c in &classes {
            let want = ap_reference(&ranked, &gts, c);
            assert!((res.per_class_ap[&c] - want).abs() < 1e-9, "seed {seed} class {c}");
            sum += want;
        }
        let want = if classes.is_empty() { 0.0 } else { sum / classes.len() as f64 };
        assert!((res.map - want).abs() < 1e-9, "seed {seed}");
    }
}

/// Replays greedy forward selection over a fully tabulated set function.
pub fn greedy_reference(n: usize, k_max: usize, table: &[f64]) -> Vec<usize> {
    let mut mask = 0usize;
    let mut order = Vec::new();
    let mut current = 0.0;
    while order.len() < k_max {
        let best = (0..n)
            .filter(|i| mask >> i & 1 == 0)
            .map(|i| (i, table[mask | 1 << i]))
            .fold(None, |acc: Option<(usize, f64)>, (i, s)| match acc {
                Some((_, b)) if b >= s => acc,
                _ => Some((i, s)),
            });
        match best {
            Some((i, s)) if s > current => {
                mask |= 1 << i;
                order.push(i);
                current = s;
            }
            _ => break,
        }
    }
    order
}

pub fn greedy_select_matches_tabulated_replay() {
    for seed in 0..INSTANCES {
        let mut r = rng(4000 + seed);
        let n = r.gen_range(1..7);
        let k_max = r.gen_range(0..=n);
        // coarse values force ties
        let table: Vec<f64> = (0..1 << n).map(|m| if m == 0 { 0.0 } else { f64::from(r.gen_range(0..6)) / 5.0 }).collect();
        let got = greedy_select(n, k_max, |s| table[s.iter().fold(0, |m, &i| m | 1 << i)]);
        assert_eq!(got, greedy_reference(n, k_max, &table), "seed {seed}");
    }
}

pub fn greedy_select_finds_the_optimum_of_modular_scores() {
    for seed in 0..INSTANCES {
        let mut r = rng(5000 + seed);
        let n = r.gen_range(1..8);
        let k_max = r.gen_range(1..=n);
        let w: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let score = |s: &[usize]| s.iter().map(|&i| w[i]).sum::<f64>();
        let got = greedy_select(n, k_max, score);
        let best = (0u32..1 << n)
            .filter(|m| m.count_ones() as usize <= k_max)
            .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect::<Vec<_>>())
            .map(|s| score(&s))
            .fold(0.0, f64::max);
        assert!((score(&got) - best).abs() < 1e-12, "seed {seed}");
    }
}


fn random_output(r: &mut ChaCha8Rng, candidates: &[(usize, BBox)], k: usize) -> ModelOutput {
    let mut scores = Vec::new();
    for _ in candidates {
        let raw: Vec<f64> = (0..=k).map(|_| r.gen_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        scores.extend(raw.iter().map(|v| v / total));
    }
    let offsets = (0..candidates.len() * 4 * k).map(|_| r.gen_range(-0.3..0.3)).collect();
    ModelOutput { num_classes: k, candidates: candidates.to_vec(), scores, offsets }
}

/// Greedy model selection against every subset's validation mAP, computed
/// up front and replayed.
pub fn greedy_model_select_matches_tabulated_replay() {
    for seed in 0..INSTANCES {
        let mut r = rng(6000 + seed);
        let k = 2;
        let mut gts = Vec::new();
        let mut candidates = Vec::new();
        for image_id in 0..2 {
            for _ in 0..2 {
                let bbox = random_box(&mut r, 30.0);
                gts.push(GroundTruth { image_id, class_id: r.gen_range(1..=k), bbox });
                candidates.push((image_id, bbox));
                candidates.push((image_id, random_box(&mut r, 30.0)));
            }
        }
        let n = r.gen_range(1..5);
        let outputs: Vec<ModelOutput> = (0..n).map(|_| random_output(&mut r, &candidates, k)).collect();
        let k_max = r.gen_range(1..=n);
        let table: Vec<f64> = (0..1usize << n)
            .map(|m| {
                if m == 0 {
                    return 0.0;
                }
                let members: Vec<&ModelOutput> = (0..n).filter(|i| m >> i & 1 == 1).map(|i| &outputs[i]).collect();
                evaluate_map(&ensemble_average(&members).unwrap().detections(0.4).unwrap(), &gts, 0.5).map
            })
            .collect();
        let got = greedy_model_select(&outputs, &gts, k_max, 0.4).unwrap();
        assert_eq!(got, greedy_reference(n, k_max, &table), "seed {seed}");
    }
}

pub fn run_all() {
    roi_max_pool_matches_reference();
    nms_matches_exhaustive_search();
    box_voting_matches_corner_average();
    map_matches_prefix_reference();
    greedy_select_matches_tabulated_replay();
    greedy_select_finds_the_optimum_of_modular_scores();
    greedy_model_select_matches_tabulated_replay();
}
