//! Axis-aligned boxes, IoU and the center/log-size regression encoding.
//!
//! Boxes are continuous rectangles: `area = (x2 - x1) * (y2 - y1)` with no
//! pixel "+1" correction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): coordinates must be finite with x1 <= x2 and y1 <= y2")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("degenerate box has zero width or height")]
    Degenerate,
}

/// Axis-aligned rectangle from `(x1, y1)` to `(x2, y2)` in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x1 > x2 || y1 > y2 {
            return Err(GeometryError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Box from center and size. Negative sizes are not checked.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self, GeometryError> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_degenerate(&self) -> bool {
        self.width() <= 0.0 || self.height() <= 0.0
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Clamp to `[0, width] x [0, height]`.
    pub fn clamp_to(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }
}

/// Intersection over union. Zero when the union has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Regression target relative to a prior: normalized center offsets and
/// log size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            dx: a[0],
            dy: a[1],
            dw: a[2],
            dh: a[3],
        }
    }
}

/// Encode `target` relative to `prior`. The prior must be non-degenerate.
pub fn encode(prior: &BBox, target: &BBox) -> Result<BoxDelta, GeometryError> {
    if prior.is_degenerate() || target.is_degenerate() {
        return Err(GeometryError::Degenerate);
    }
    let (pcx, pcy) = prior.center();
    let (tcx, tcy) = target.center();
    let (pw, ph) = (prior.width(), prior.height());
    Ok(BoxDelta {
        dx: (tcx - pcx) / pw,
        dy: (tcy - pcy) / ph,
        dw: (target.width() / pw).ln(),
        dh: (target.height() / ph).ln(),
    })
}

/// Inverse of [`encode`]. When `clamp` is `Some((w, h))` the result is
/// clipped to the scene bounds.
pub fn decode(prior: &BBox, delta: &BoxDelta, clamp: Option<(f64, f64)>) -> BBox {
    let (pcx, pcy) = prior.center();
    let (pw, ph) = (prior.width(), prior.height());
    let cx = pcx + delta.dx * pw;
    let cy = pcy + delta.dy * ph;
    let w = pw * delta.dw.exp();
    let h = ph * delta.dh.exp();
    let b = BBox::from_center(cx, cy, w, h);
    match clamp {
        Some((sw, sh)) => b.clamp_to(sw, sh),
        None => b,
    }
}

/// Partial derivatives of a decoded box's corners with respect to the delta
/// components, as rows `d(x1, y1, x2, y2) / d(dx, dy, dw, dh)`.
pub(crate) fn decode_jacobian(prior: &BBox, delta: &BoxDelta) -> [[f64; 4]; 4] {
    let (pw, ph) = (prior.width(), prior.height());
    let hw = 0.5 * pw * delta.dw.exp();
    let hh = 0.5 * ph * delta.dh.exp();
    [
        [pw, 0.0, -hw, 0.0],
        [0.0, ph, 0.0, -hh],
        [pw, 0.0, hw, 0.0],
        [0.0, ph, 0.0, hh],
    ]
}

/// Gradient of `iou(a, b)` with respect to the corners `(x1, y1, x2, y2)` of
/// `a`, holding `b` fixed. Returns zeros where the boxes do not overlap.
pub(crate) fn iou_grad_wrt_first(a: &BBox, b: &BBox) -> [f64; 4] {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return [0.0; 4];
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return [0.0; 4];
    }
    let (aw, ah) = (a.width(), a.height());

    // d(inter)/d(corner): only the active min/max contributes.
    let di_x1 = if a.x1 > b.x1 { -ih } else { 0.0 };
    let di_x2 = if a.x2 < b.x2 { ih } else { 0.0 };
    let di_y1 = if a.y1 > b.y1 { -iw } else { 0.0 };
    let di_y2 = if a.y2 < b.y2 { iw } else { 0.0 };
    let da = [-ah, -aw, ah, aw];
    let di = [di_x1, di_y1, di_x2, di_y2];

    let mut g = [0.0; 4];
    for k in 0..4 {
        let du = da[k] - di[k];
        g[k] = (di[k] * union - inter * du) / (union * union);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        let b = bx(3.0, 4.0, 10.0, 12.5);
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        let v = iou(&bx(0.0, 0.0, 2.0, 2.0), &bx(1.0, 1.0, 3.0, 3.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn zero_union_is_zero() {
        let p = bx(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn rejects_inverted_box() {
        assert!(BBox::new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn encode_examples() {
        let b = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(encode(&b, &b).unwrap(), BoxDelta::default());
        let d = encode(&b, &bx(1.0, 1.0, 3.0, 3.0)).unwrap();
        assert_eq!(d, BoxDelta { dx: 0.5, dy: 0.5, dw: 0.0, dh: 0.0 });
        assert_eq!(
            encode(&b, &bx(1.0, 1.0, 1.0, 3.0)),
            Err(GeometryError::Degenerate)
        );
    }

    #[test]
    fn decode_examples() {
        let b = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(decode(&b, &BoxDelta::default(), None), b);
        let d = BoxDelta { dx: 0.5, dy: 0.5, dw: 0.0, dh: 0.0 };
        assert_eq!(decode(&b, &d, None), bx(1.0, 1.0, 3.0, 3.0));
        assert_eq!(decode(&b, &d, Some((2.5, 2.5))), bx(1.0, 1.0, 2.5, 2.5));
    }

    #[test]
    fn iou_gradient_matches_finite_differences() {
        let a = bx(1.0, 2.0, 7.5, 9.0);
        let b = bx(3.0, 1.0, 9.0, 6.0);
        let g = iou_grad_wrt_first(&a, &b);
        let h = 1e-6;
        for k in 0..4 {
            let mut p = a.to_array();
            let mut m = a.to_array();
            p[k] += h;
            m[k] -= h;
            let fd = (iou(&BBox::from_array(p).unwrap(), &b) - iou(&BBox::from_array(m).unwrap(), &b))
                / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8, "k={k} fd={fd} analytic={}", g[k]);
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.5..40.0f64, 0.5..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn iou_translation_invariant(a in arb_box(), b in arb_box(), tx in -100.0..100.0f64, ty in -100.0..100.0f64) {
            let moved = iou(&a.translate(tx, ty), &b.translate(tx, ty));
            prop_assert!((moved - iou(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn decode_inverts_encode(p in arb_box(), t in arb_box()) {
            let back = decode(&p, &encode(&p, &t).unwrap(), None);
            let scale = t.to_array().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (x, y) in back.to_array().iter().zip(t.to_array()) {
                prop_assert!((x - y).abs() / scale < 1e-9);
            }
        }
    }
}
