//! mAP and false-positive breakdown on a hand-made set of detections.

use gbdnet::boxes::BBox;
use gbdnet::eval::{evaluate, GroundTruth, ImageDetection};
use gbdnet::postprocess::Detection;

fn main() -> gbdnet::Result<()> {
    let b = |x, y| BBox::new(x, y, 10.0, 10.0);
    let gts = vec![
        GroundTruth { image_id: 0, class_id: 1, bbox: b(10.0, 10.0)? },
        GroundTruth { image_id: 0, class_id: 2, bbox: b(40.0, 10.0)? },
        GroundTruth { image_id: 1, class_id: 1, bbox: b(20.0, 30.0)? },
    ];
    let d = |image_id, class_id, bbox, score| ImageDetection { image_id, detection: Detection { bbox, class_id, score } };
    let dets = vec![
        d(0, 1, b(10.0, 10.0)?, 0.95),
        d(0, 1, b(11.0, 10.0)?, 0.9), // duplicate
        d(0, 1, b(40.0, 11.0)?, 0.8), // confused with class 2
        d(1, 1, b(21.0, 31.0)?, 0.7),
        d(0, 2, b(40.0, 10.0)?, 0.6),
        d(1, 2, b(50.0, 50.0)?, 0.5), // background
    ];
    let res = evaluate(&dets, &gts, 0.5, 1.0);
    println!("per-class AP {:?}", res.per_class_ap);
    println!("mAP {:.4}", res.map);
    let f = res.fp_fractions;
    println!("false positives: {} (loc {:.2}, other {:.2}, bg {:.2})", f.count, f.loc, f.other, f.bg);
    Ok(())
}
