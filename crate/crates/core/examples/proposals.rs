//! Box shaking and the IoU spread of generated training proposals.

use gbdnet::boxes::{iou, shake_box, CornerRect, ShakeSpec};
use gbdnet::pipeline::proposals::gen_proposals;
use gbdnet::pipeline::{gen_synthetic_dataset, DatasetSpec, JitterSpec};

fn main() -> gbdnet::Result<()> {
    let b = CornerRect::new(100.0, 100.0, 199.0, 149.0);
    let spec = ShakeSpec::default();
    println!("shake {:?} -> {:?}", b, shake_box(&b, &spec, [0.1, -0.1, 0.1, -0.1])?);

    let ds = gen_synthetic_dataset(&DatasetSpec::default(), 50, 3)?;
    let mut hist = [0usize; 10];
    let mut positives = 0;
    let mut total = 0;
    for scene in &ds.scenes {
        for p in gen_proposals(&scene.objects, &JitterSpec::default(), ds.spec.width, ds.spec.height, scene.id as u64)? {
            let best = scene.objects.iter().map(|o| iou(&p.bbox, &o.bbox)).fold(0.0, f64::max);
            hist[((best * 10.0) as usize).min(9)] += 1;
            positives += usize::from(p.label > 0);
            total += 1;
        }
    }
    println!("{total} proposals, {positives} labelled foreground");
    for (i, n) in hist.iter().enumerate() {
        println!("IoU {:.1}-{:.1} {:>5} {}", i as f64 / 10.0, (i + 1) as f64 / 10.0, n, "#".repeat(n / 20));
    }
    Ok(())
}
