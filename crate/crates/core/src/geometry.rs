//! Box algebra in normalized image coordinates.
//!
//! Every box is stored in center format `(cx, cy, w, h)` relative to the image
//! width and height. Corner form `(x1, y1, x2, y2)` is always clipped to the
//! unit square, so overlap measures only ever see the visible part of a box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Smallest width/height a box may be squashed or clipped to.
pub const MIN_SIDE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let reject = |reason| Err(Error::InvalidBox { cx, cy, w, h, reason });
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return reject("non-finite coordinate");
        }
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
            return reject("center outside the unit square");
        }
        if w <= 0.0 || h <= 0.0 {
            return reject("non-positive side");
        }
        if w > 1.0 || h > 1.0 {
            return reject("side larger than the image");
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Builds a box from corners, rejecting empty or inverted extents.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::InvalidBox {
                cx: 0.5 * (x1 + x2),
                cy: 0.5 * (y1 + y2),
                w: x2 - x1,
                h: y2 - y1,
                reason: "corners not ordered",
            });
        }
        Self::new(0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1)
    }

    /// Maps arbitrary finite values onto the nearest valid box: the center is
    /// clamped to the unit square and sides to `[MIN_SIDE, 1]`.
    pub fn clamped(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        let fix = |v: f64, lo: f64| if v.is_nan() { lo } else { v.clamp(lo, 1.0) };
        Self {
            cx: fix(cx, 0.0),
            cy: fix(cy, 0.0),
            w: fix(w, MIN_SIDE),
            h: fix(h, MIN_SIDE),
        }
    }

    /// Builds a box from pixel-space corners with the half-open convention
    /// (`x2` is one past the last covered column).
    pub fn from_pixel_corners(x1: f64, y1: f64, x2: f64, y2: f64, width: usize, height: usize) -> Result<Self> {
        let (wf, hf) = (width as f64, height as f64);
        Self::from_corners(x1 / wf, y1 / hf, x2 / wf, y2 / hf)
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Corner form clipped to `[0, 1]`.
    pub fn to_corners(&self) -> [f64; 4] {
        [
            (self.cx - 0.5 * self.w).clamp(0.0, 1.0),
            (self.cy - 0.5 * self.h).clamp(0.0, 1.0),
            (self.cx + 0.5 * self.w).clamp(0.0, 1.0),
            (self.cy + 0.5 * self.h).clamp(0.0, 1.0),
        ]
    }

    pub fn area(&self) -> f64 {
        let [x1, y1, x2, y2] = self.to_corners();
        (x2 - x1) * (y2 - y1)
    }

    /// The same box with its visible part only (corners clipped to the image).
    pub fn clipped(&self) -> Self {
        let inside = |c: f64, s: f64| c - 0.5 * s >= 0.0 && c + 0.5 * s <= 1.0;
        if inside(self.cx, self.w) && inside(self.cy, self.h) {
            return *self;
        }
        let [x1, y1, x2, y2] = self.to_corners();
        Self::clamped(0.5 * (x1 + x2), 0.5 * (y1 + y2), (x2 - x1).max(MIN_SIDE), (y2 - y1).max(MIN_SIDE))
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

fn intersection(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    iw * ih
}

fn corner_area(c: &[f64; 4]) -> f64 {
    (c[2] - c[0]) * (c[3] - c[1])
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let inter = intersection(&ca, &cb);
    let union = corner_area(&ca) + corner_area(&cb) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not covered by
/// the union.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let inter = intersection(&ca, &cb);
    let union = corner_area(&ca) + corner_area(&cb) - inter;
    let enclosure = (ca[2].max(cb[2]) - ca[0].min(cb[0])) * (ca[3].max(cb[3]) - ca[1].min(cb[1]));
    if union <= 0.0 || enclosure <= 0.0 {
        return 0.0;
    }
    inter / union - (enclosure - union) / enclosure
}

/// Table of `iou(a[i], b[j])`.
pub fn pairwise_iou(a: &[BoundingBox], b: &[BoundingBox]) -> Matrix {
    Matrix::from_fn(a.len(), b.len(), |i, j| iou(&a[i], &b[j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corners(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::from_corners(x1, y1, x2, y2).unwrap()
    }

    fn random_inner_box(rng: &mut impl Rng) -> BoundingBox {
        let x1 = rng.random_range(0.0..0.8);
        let y1 = rng.random_range(0.0..0.8);
        let x2 = rng.random_range(x1 + 0.01..=1.0);
        let y2 = rng.random_range(y1 + 0.01..=1.0);
        corners(x1, y1, x2, y2)
    }

    #[test]
    fn corners_of_full_and_centered_boxes() {
        let full = BoundingBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(full.to_corners(), [0.0, 0.0, 1.0, 1.0]);
        let b = BoundingBox::new(0.5, 0.5, 0.2, 0.4).unwrap();
        let c = b.to_corners();
        for (got, want) in c.iter().zip([0.4, 0.3, 0.6, 0.7]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn corner_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let b = random_inner_box(&mut rng);
            let [x1, y1, x2, y2] = b.to_corners();
            let back = BoundingBox::from_corners(x1, y1, x2, y2).unwrap();
            for (u, v) in b.to_array().iter().zip(back.to_array()) {
                worst = worst.max((u - v).abs());
            }
        }
        assert!(worst < 1e-12, "round-trip error {worst}");
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BoundingBox::new(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(BoundingBox::new(0.5, 0.5, 0.1, -0.1).is_err());
        assert!(BoundingBox::new(1.2, 0.5, 0.1, 0.1).is_err());
        assert!(BoundingBox::new(0.5, 0.5, 1.5, 0.1).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.5, 0.1, 0.1).is_err());
        assert!(BoundingBox::from_corners(0.3, 0.1, 0.3, 0.2).is_err());
    }

    #[test]
    fn iou_hand_cases() {
        let a = corners(0.0, 0.0, 0.2, 0.2);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &corners(0.5, 0.5, 0.7, 0.7)), 0.0);
        let v = iou(&a, &corners(0.1, 0.1, 0.3, 0.3));
        assert!((v - 0.01 / 0.07).abs() < 1e-12);
    }

    #[test]
    fn giou_hand_cases() {
        let a = corners(0.0, 0.0, 0.1, 0.1);
        assert!((giou(&a, &a) - 1.0).abs() < 1e-12);
        let v = giou(&a, &corners(0.2, 0.2, 0.3, 0.3));
        assert!((v - (0.0 - 0.07 / 0.09)).abs() < 1e-12, "{v}");
    }

    #[test]
    fn giou_symmetric_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let a = random_inner_box(&mut rng);
            let b = random_inner_box(&mut rng);
            assert_eq!(giou(&a, &b), giou(&b, &a));
        }
    }

    #[test]
    fn pairwise_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<_> = (0..5).map(|_| random_inner_box(&mut rng)).collect();
        let b: Vec<_> = (0..7).map(|_| random_inner_box(&mut rng)).collect();
        let m = pairwise_iou(&a, &b);
        assert_eq!((m.rows(), m.cols()), (5, 7));
        for i in 0..5 {
            for j in 0..7 {
                assert_eq!(m.get(i, j), iou(&a[i], &b[j]));
            }
        }
        let empty = pairwise_iou(&[], &b);
        assert_eq!((empty.rows(), empty.cols()), (0, 7));
        assert_eq!(pairwise_iou(&a[..1], &a[..1]).get(0, 0), 1.0);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.001..1.0f64, 0.001..1.0f64)
            .prop_map(|(cx, cy, w, h)| BoundingBox::new(cx, cy, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn overlap_measures_are_symmetric_and_ordered(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            prop_assert!((giou(&a, &b) - giou(&b, &a)).abs() < 1e-15);
            prop_assert!(giou(&a, &b) <= iou(&a, &b) + 1e-12);
            prop_assert!((0.0..=1.0).contains(&iou(&a, &b)));
            prop_assert!((-1.0..=1.0).contains(&giou(&a, &b)));
        }

        #[test]
        fn clamped_boxes_are_valid(cx in -2.0..2.0f64, cy in -2.0..2.0f64, w in -1.0..2.0f64, h in -1.0..2.0f64) {
            let b = BoundingBox::clamped(cx, cy, w, h);
            prop_assert!(BoundingBox::new(b.cx(), b.cy(), b.w(), b.h()).is_ok());
            let [x1, y1, x2, y2] = b.to_corners();
            prop_assert!(x1 < x2 && y1 < y2);
        }
    }

    #[test]
    fn giou_equals_iou_when_union_fills_enclosure() {
        let a = corners(0.1, 0.1, 0.5, 0.5);
        let b = corners(0.2, 0.2, 0.4, 0.4);
        assert!((giou(&a, &b) - iou(&a, &b)).abs() < 1e-12);
    }
}
