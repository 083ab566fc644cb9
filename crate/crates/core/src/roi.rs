//! Region-of-interest max pooling and multi-context pooling.

use crate::boxes::{pad_box, BBox, ContextSet};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Half-open cell rectangle `[x0, x1) x [y0, y1)` on a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FeatureRegion {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl FeatureRegion {
    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn contains(&self, other: &FeatureRegion) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    /// Intersection with a `w x h` map.
    pub fn clamped(&self, w: usize, h: usize) -> FeatureRegion {
        FeatureRegion {
            x0: self.x0.min(w),
            y0: self.y0.min(h),
            x1: self.x1.min(w),
            y1: self.y1.min(h),
        }
    }
}

/// Maps a pixel box onto the cells of a feature map with the given stride:
/// start corners floored, end corners ceiled, clamped, at least one cell.
pub fn box_to_feature_region(b: &BBox, stride: usize, fmap_w: usize, fmap_h: usize) -> FeatureRegion {
    let s = stride.max(1) as f64;
    let [x1, y1, x2, y2] = b.corners();
    let axis = |lo: f64, hi: f64, len: usize| -> (usize, usize) {
        let len_f = len as f64;
        let start = (lo / s).floor().clamp(0.0, len_f - 1.0) as usize;
        let end = (hi / s).ceil().clamp(0.0, len_f) as usize;
        (start, end.max(start + 1))
    };
    let (x0, x1) = axis(x1, x2, fmap_w);
    let (y0, y1) = axis(y1, y2, fmap_h);
    FeatureRegion { x0, y0, x1, y1 }
}

/// Splits `len` cells starting at `start` into `bins` near-equal half-open
/// intervals. Edges are `round(i * len / bins)`; an empty bin takes the
/// nearest cell.
pub fn bin_edges(start: usize, len: usize, bins: usize) -> Vec<(usize, usize)> {
    debug_assert!(len > 0 && bins > 0);
    let edge = |i: usize| (2 * i * len + bins) / (2 * bins);
    (0..bins)
        .map(|i| {
            let (mut a, mut b) = (edge(i), edge(i + 1));
            if b <= a {
                if a < len {
                    b = a + 1;
                } else {
                    a = len - 1;
                    b = len;
                }
            }
            (start + a, start + b)
        })
        .collect()
}

/// Pools one region of batch item `item` into a `(c, out_h, out_w)` block.
/// Returns pooled values and, per output cell, the flat input index of the
/// maximum (first in row-major order on ties).
pub(crate) fn pool_region(
    fmap: &[f64],
    shape: Shape,
    item: usize,
    region: &FeatureRegion,
    out_h: usize,
    out_w: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let r = region.clamped(shape.w, shape.h);
    if r.width() == 0 || r.height() == 0 {
        return Err(Error::Domain(format!(
            "roi {region:?} is empty inside a {}x{} map",
            shape.w, shape.h
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Domain("roi output size must be positive".into()));
    }
    let rows = bin_edges(r.y0, r.height(), out_h);
    let cols = bin_edges(r.x0, r.width(), out_w);
    let mut vals = Vec::with_capacity(shape.c * out_h * out_w);
    let mut arg = Vec::with_capacity(vals.capacity());
    for c in 0..shape.c {
        let base = (item * shape.c + c) * shape.plane();
        for &(ya, yb) in &rows {
            for &(xa, xb) in &cols {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + ya * shape.w + xa;
                for y in ya..yb {
                    let row = base + y * shape.w;
                    for x in xa..xb {
                        let v = fmap[row + x];
                        if v > best {
                            best = v;
                            best_i = row + x;
                        }
                    }
                }
                vals.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((vals, arg))
}

/// Max-pools `region` of every batch item into an `out_h x out_w` grid.
pub fn roi_max_pool(
    fmap: &Tensor,
    region: &FeatureRegion,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let s = fmap.shape();
    let mut data = Vec::with_capacity(s.n * s.c * out_h * out_w);
    for n in 0..s.n {
        let (v, _) = pool_region(fmap.data(), s, n, region, out_h, out_w)?;
        data.extend(v);
    }
    Tensor::from_vec(Shape::new(s.n, s.c, out_h, out_w), data)
}

/// Pooled features of one box, one tensor per context pad in order.
pub fn multi_context_pool(
    fmap: &Tensor,
    b: &BBox,
    ctx: &ContextSet,
    stride: usize,
    out: usize,
) -> Result<Vec<Tensor>> {
    let s = fmap.shape();
    ctx.pads()
        .iter()
        .map(|&p| {
            let padded = pad_box(b, p)?;
            let region = box_to_feature_region(&padded, stride, s.w, s.h);
            roi_max_pool(fmap, &region, out, out)
        })
        .collect()
}
