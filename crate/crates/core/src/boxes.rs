//! Box algebra: context padding, overlap, flips, shaking and pyramid level choice.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Center-format rectangle in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Domain(format!("invalid box {self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Continuous corner extent `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.x - 0.5 * self.w,
            self.y - 0.5 * self.h,
            self.x + 0.5 * self.w,
            self.y + 0.5 * self.h,
        ]
    }

    pub fn from_corners(c: [f64; 4]) -> Result<Self> {
        Self::new(
            0.5 * (c[0] + c[2]),
            0.5 * (c[1] + c[3]),
            c[2] - c[0],
            c[3] - c[1],
        )
    }

    pub fn scaled(&self, s: f64) -> BBox {
        BBox {
            x: self.x * s,
            y: self.y * s,
            w: self.w * s,
            h: self.h * s,
        }
    }

    /// Clips the extent to `[0, width] x [0, height]`; `None` if nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let c = self.corners();
        let c = [
            c[0].clamp(0.0, width),
            c[1].clamp(0.0, height),
            c[2].clamp(0.0, width),
            c[3].clamp(0.0, height),
        ];
        BBox::from_corners(c).ok()
    }
}

/// Ordered context pads; each pad yields one branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextSet {
    pads: Vec<f64>,
}

impl ContextSet {
    pub const DEFAULT_PADS: [f64; 4] = [-0.2, 0.2, 0.8, 1.7];

    pub fn new(pads: Vec<f64>) -> Result<Self> {
        if pads.is_empty() {
            return Err(Error::Domain("context set needs at least one pad".into()));
        }
        if pads.iter().any(|p| !p.is_finite() || 1.0 + p <= 0.0) {
            return Err(Error::Domain(format!("pads {pads:?} need 1 + p > 0")));
        }
        if pads.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain(format!("pads {pads:?} must be strictly increasing")));
        }
        Ok(Self { pads })
    }

    pub fn pads(&self) -> &[f64] {
        &self.pads
    }

    pub fn len(&self) -> usize {
        self.pads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pads.is_empty()
    }
}

impl Default for ContextSet {
    fn default() -> Self {
        Self {
            pads: Self::DEFAULT_PADS.to_vec(),
        }
    }
}

/// Enlarges (p > 0) or shrinks (p < 0) a box about its center by `1 + p`.
pub fn pad_box(b: &BBox, p: f64) -> Result<BBox> {
    if !(1.0 + p > 0.0) {
        return Err(Error::Domain(format!("pad {p} gives a non-positive scale")));
    }
    Ok(BBox {
        x: b.x,
        y: b.y,
        w: (1.0 + p) * b.w,
        h: (1.0 + p) * b.h,
    })
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Mirrors a box across the vertical center line of an image `image_w` pixels wide.
pub fn flip_box(b: &BBox, image_w: usize) -> BBox {
    BBox {
        x: image_w as f64 - 1.0 - b.x,
        ..*b
    }
}

/// Inclusive pixel corners `(x1, y1, x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CornerRect {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl CornerRect {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShakeSpec {
    pub margin: u32,
    pub alpha_range: f64,
}

impl Default for ShakeSpec {
    fn default() -> Self {
        Self {
            margin: 32,
            alpha_range: 0.1,
        }
    }
}

/// Expands a box by `spec.margin`, then moves each edge by `alpha_i` times
/// the original width or height (`W = x2 - x1 + 1`, `H = y2 - y1 + 1`).
pub fn shake_box(b: &CornerRect, spec: &ShakeSpec, alphas: [f64; 4]) -> Result<CornerRect> {
    if !(spec.alpha_range >= 0.0) {
        return Err(Error::Domain("alpha_range must be non-negative".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(a.abs() <= spec.alpha_range)) {
        return Err(Error::Domain(format!(
            "shake factor {a} outside ±{}",
            spec.alpha_range
        )));
    }
    let m = f64::from(spec.margin);
    let big_w = b.x2 - b.x1 + 1.0;
    let big_h = b.y2 - b.y1 + 1.0;
    let out = CornerRect {
        x1: b.x1 - m + alphas[0] * big_w,
        y1: b.y1 - m + alphas[1] * big_h,
        x2: b.x2 + m + alphas[2] * big_w,
        y2: b.y2 + m + alphas[3] * big_h,
    };
    if out.x2 <= out.x1 || out.y2 <= out.y1 {
        return Err(Error::Domain(format!("shaken box inverted: {out:?}")));
    }
    Ok(out)
}

/// Picks the pyramid level whose resized box area is closest (in log ratio)
/// to `canonical_area`. `scales` are shorter-side targets; the resize factor
/// of a level is `target / image_short_side`. Ties go to the smaller scale.
pub fn pyramid_scale_select(
    b: &BBox,
    scales: &[f64],
    image_short_side: f64,
    canonical_area: f64,
) -> usize {
    let mut best = 0;
    let mut best_cost = f64::INFINITY;
    for (i, &target) in scales.iter().enumerate() {
        let s = target / image_short_side;
        let cost = (b.area() * s * s / canonical_area).ln().abs();
        let better = cost < best_cost
            || (cost == best_cost && target < scales[best]);
        if better {
            best = i;
            best_cost = cost;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn pad_box_examples() {
        let b = bx(100.0, 100.0, 50.0, 40.0);
        let p = pad_box(&b, 0.2).unwrap();
        assert!((p.w - 60.0).abs() < 1e-12 && (p.h - 48.0).abs() < 1e-12);
        assert_eq!((p.x, p.y), (100.0, 100.0));
        assert_eq!(pad_box(&b, 0.0).unwrap(), b);
        let p = pad_box(&b, 1.7).unwrap();
        assert!((p.w - 135.0).abs() < 1e-12 && (p.h - 108.0).abs() < 1e-12);
        assert!(matches!(pad_box(&b, -1.0), Err(Error::Domain(_))));
        assert!(pad_box(&b, -1.5).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = bx(5.0, 5.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(50.0, 50.0, 4.0, 4.0)), 0.0);
        // touching edges only
        assert_eq!(iou(&a, &bx(15.0, 5.0, 10.0, 10.0)), 0.0);
        // pixel-grid count: overlap 5x10 = 50 cells, union 150
        assert!((iou(&a, &bx(10.0, 5.0, 10.0, 10.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn flip_examples() {
        let b = bx(32.0, 7.0, 5.0, 9.0);
        assert_eq!(flip_box(&b, 65), b);
        let b = bx(10.0, 20.0, 8.0, 8.0);
        assert_eq!(flip_box(&b, 64), bx(53.0, 20.0, 8.0, 8.0));
        assert_eq!(flip_box(&flip_box(&b, 64), 64), b);
    }

    #[test]
    fn shake_examples() {
        let spec = ShakeSpec::default();
        let b = CornerRect::new(100.0, 100.0, 199.0, 149.0);
        assert_eq!(
            shake_box(&b, &spec, [0.0; 4]).unwrap(),
            CornerRect::new(68.0, 68.0, 231.0, 181.0)
        );
        let s = shake_box(&b, &spec, [0.1, -0.1, 0.1, -0.1]).unwrap();
        let want = [78.0, 63.0, 241.0, 176.0];
        for (got, want) in s.to_array().iter().zip(want) {
            assert!((got - want).abs() < 1e-9, "{s:?}");
        }
        let zero = ShakeSpec {
            margin: 0,
            alpha_range: 0.1,
        };
        assert_eq!(shake_box(&b, &zero, [0.0; 4]).unwrap(), b);
        assert!(shake_box(&b, &spec, [0.2, 0.0, 0.0, 0.0]).is_err());
        let tiny = CornerRect::new(10.0, 10.0, 10.0, 10.0);
        let wide = ShakeSpec {
            margin: 0,
            alpha_range: 1.0,
        };
        assert!(matches!(
            shake_box(&tiny, &wide, [0.9, 0.0, -0.9, 0.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn context_set_validation() {
        assert_eq!(ContextSet::default().pads(), &[-0.2, 0.2, 0.8, 1.7]);
        assert!(ContextSet::new(vec![0.2, 0.2]).is_err());
        assert!(ContextSet::new(vec![-1.0, 0.2]).is_err());
        assert!(ContextSet::new(vec![]).is_err());
    }

    #[test]
    fn pyramid_examples() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(pyramid_scale_select(&b, &[64.0], 64.0, 1e4), 0);
        // level 1 doubles the image: area 100 * 4 == 400
        assert_eq!(pyramid_scale_select(&b, &[32.0, 128.0, 256.0], 64.0, 400.0), 1);
        // equal log distance from 100 at factors 0.5 and 2 -> smaller scale
        assert_eq!(pyramid_scale_select(&b, &[128.0, 32.0], 64.0, 100.0), 1);
    }
}
