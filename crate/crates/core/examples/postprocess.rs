//! Per-class NMS, box voting and flip fusion on hand-made detections.

use gbdnet::boxes::BBox;
use gbdnet::postprocess::{box_voting, fuse_flip, nms, Detection, ScoredBoxes};

fn det(x: f64, y: f64, class_id: usize, score: f64) -> gbdnet::Result<Detection> {
    Ok(Detection { bbox: BBox::new(x, y, 20.0, 20.0)?, class_id, score })
}

fn main() -> gbdnet::Result<()> {
    let pool = vec![
        det(30.0, 30.0, 1, 0.9)?,
        det(32.0, 30.0, 1, 0.8)?,
        det(28.0, 31.0, 1, 0.6)?,
        det(31.0, 30.0, 2, 0.7)?,
        det(80.0, 80.0, 1, 0.5)?,
    ];
    let kept = nms(&pool, 0.4);
    println!("nms kept {} of {}", kept.len(), pool.len());
    for (k, v) in kept.iter().zip(box_voting(&kept, &pool, 0.5)) {
        println!("class {} score {:.2}: {:?} -> voted {:?}", k.class_id, k.score, k.bbox, v.bbox);
    }

    // the mirrored pass sees the box at 64 - 1 - 10 = 53, one pixel off here
    let orig = ScoredBoxes { scores: vec![0.8], boxes: vec![BBox::new(10.0, 20.0, 8.0, 8.0)?] };
    let flipped = ScoredBoxes { scores: vec![0.6], boxes: vec![BBox::new(54.0, 20.0, 8.0, 8.0)?] };
    let fused = fuse_flip(&orig, &flipped, 64)?;
    println!("flip fusion: score {:.2} box {:?}", fused.scores[0], fused.boxes[0]);
    Ok(())
}
