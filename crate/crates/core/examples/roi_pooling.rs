//! Pools one box at four context pads from a ramp feature map.

use gbdnet::boxes::{pad_box, BBox, ContextSet};
use gbdnet::roi::{box_to_feature_region, multi_context_pool};
use gbdnet::tensor::{Shape, Tensor};

fn main() -> gbdnet::Result<()> {
    let (h, w) = (16, 16);
    let fmap = Tensor::from_vec(Shape::new(1, 1, h, w), (0..h * w).map(|v| v as f64).collect())?;
    let b = BBox::new(24.0, 28.0, 16.0, 12.0)?;
    let ctx = ContextSet::default();
    let stride = 4;
    let pooled = multi_context_pool(&fmap, &b, &ctx, stride, 3)?;
    for (p, t) in ctx.pads().iter().zip(&pooled) {
        let region = box_to_feature_region(&pad_box(&b, *p)?, stride, w, h);
        println!("pad {p:>4}: cells x {}..{} y {}..{} -> {:?}", region.x0, region.x1, region.y0, region.y1, t.data());
    }
    Ok(())
}
