//! Quantized box arithmetic on the 1000×1000 canvas.
//!
//! Coordinates are integers in `0..=1000` with `(0, 0)` at the top-left. For
//! area purposes a box covers the unit cells `(x, y)` with
//! `xmin <= x < xmax` and `ymin <= y < ymax`, so analytic areas and rasterized
//! cell counts agree exactly.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Largest coordinate value on the canvas (inclusive).
pub const CANVAS: u32 = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("coordinate {0} is outside 0..=1000")]
    OutOfRange(i64),
    #[error("box {0:?} has non-positive extent (need xmin < xmax and ymin < ymax)")]
    Degenerate([i64; 4]),
}

/// An axis-aligned box with integer coordinates and strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BBox {
    xmin: u32,
    ymin: u32,
    xmax: u32,
    ymax: u32,
}

impl BBox {
    pub fn new(xmin: i64, ymin: i64, xmax: i64, ymax: i64) -> Result<Self, GeometryError> {
        for v in [xmin, ymin, xmax, ymax] {
            if !(0..=CANVAS as i64).contains(&v) {
                return Err(GeometryError::OutOfRange(v));
            }
        }
        if xmin >= xmax || ymin >= ymax {
            return Err(GeometryError::Degenerate([xmin, ymin, xmax, ymax]));
        }
        Ok(Self {
            xmin: xmin as u32,
            ymin: ymin as u32,
            xmax: xmax as u32,
            ymax: ymax as u32,
        })
    }

    /// The whole canvas, `[0, 0, 1000, 1000]`.
    pub const fn full() -> Self {
        Self {
            xmin: 0,
            ymin: 0,
            xmax: CANVAS,
            ymax: CANVAS,
        }
    }

    pub fn xmin(&self) -> u32 {
        self.xmin
    }
    pub fn ymin(&self) -> u32 {
        self.ymin
    }
    pub fn xmax(&self) -> u32 {
        self.xmax
    }
    pub fn ymax(&self) -> u32 {
        self.ymax
    }

    pub fn width(&self) -> u32 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> u32 {
        self.ymax - self.ymin
    }

    pub fn coords(&self) -> [u32; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }

    /// Area in square canvas units.
    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.xmin + self.xmax) as f64 / 2.0,
            (self.ymin + self.ymax) as f64 / 2.0,
        )
    }

    /// Area of the overlap with `other`; 0 when they only touch or are disjoint.
    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = self.xmax.min(other.xmax).saturating_sub(self.xmin.max(other.xmin));
        let h = self.ymax.min(other.ymax).saturating_sub(self.ymin.max(other.ymin));
        w as u64 * h as u64
    }

    /// Intersection and union areas as an exact ratio `(num, den)`.
    pub fn iou_ratio(&self, other: &BBox) -> (u64, u64) {
        let inter = self.intersection_area(other);
        (inter, self.area() + other.area() - inter)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let (num, den) = self.iou_ratio(other);
        num as f64 / den as f64
    }

    /// True iff `inner` lies within `self` dilated by `margin` on every side.
    pub fn contains(&self, inner: &BBox, margin: u32) -> bool {
        let m = margin as i64;
        self.xmin as i64 - m <= inner.xmin as i64
            && self.ymin as i64 - m <= inner.ymin as i64
            && inner.xmax as i64 <= self.xmax as i64 + m
            && inner.ymax as i64 <= self.ymax as i64 + m
    }

    /// Shift by `(dx, dy)`, clamped so the box stays on the canvas. The size is
    /// preserved.
    pub fn translated(&self, dx: i64, dy: i64) -> BBox {
        let (xmin, xmax) = shift_axis(self.xmin, self.xmax, dx);
        let (ymin, ymax) = shift_axis(self.ymin, self.ymax, dy);
        BBox {
            xmin,
            ymin,
            xmax,
            ymax,
        }
    }

    /// Box from possibly out-of-range integer edges: clamps to the canvas and
    /// restores a positive extent the same way [`quantize`] does.
    pub fn from_edges_clamped(xmin: i64, ymin: i64, xmax: i64, ymax: i64) -> BBox {
        let (xmin, xmax) = repair_axis(xmin, xmax);
        let (ymin, ymax) = repair_axis(ymin, ymax);
        BBox {
            xmin,
            ymin,
            xmax,
            ymax,
        }
    }
}

fn shift_axis(lo: u32, hi: u32, d: i64) -> (u32, u32) {
    let len = (hi - lo) as i64;
    let lo = (lo as i64 + d).clamp(0, CANVAS as i64 - len);
    (lo as u32, (lo + len) as u32)
}

fn repair_axis(a: i64, b: i64) -> (u32, u32) {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let lo = lo.clamp(0, CANVAS as i64);
    let hi = hi.clamp(0, CANVAS as i64);
    if lo < hi {
        (lo as u32, hi as u32)
    } else if hi < CANVAS as i64 {
        (lo as u32, hi as u32 + 1)
    } else {
        (lo as u32 - 1, hi as u32)
    }
}

/// Quantize normalized coordinates onto the integer canvas.
///
/// Each value is clamped to `[0, 1]`, scaled by 1000 and rounded half away from
/// zero. A collapsed axis is widened by one unit (downwards at the 1000 edge).
/// NaN inputs are treated as 0.
pub fn quantize(nx: f64, ny: f64, nx_max: f64, ny_max: f64) -> BBox {
    let q = |v: f64| -> i64 {
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        (v * CANVAS as f64).round() as i64
    };
    BBox::from_edges_clamped(q(nx), q(ny), q(nx_max), q(ny_max))
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}, {}, {}, {}]",
            self.xmin, self.ymin, self.xmax, self.ymax
        )
    }
}

impl TryFrom<[i64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(c: [i64; 4]) -> Result<Self, Self::Error> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.coords().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let c = <[i64; 4]>::deserialize(deserializer)?;
        BBox::try_from(c).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: i64, y0: i64, x1: i64, y1: i64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn area_examples() {
        assert_eq!(BBox::full().area(), 1_000_000);
        assert_eq!(b(376, 336, 744, 696).area(), 132_480);
        assert_eq!(b(480, 350, 520, 400).area(), 2_000);
    }

    #[test]
    fn iou_examples() {
        let a = b(300, 500, 700, 900);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(b(0, 0, 100, 100).iou(&b(500, 500, 600, 600)), 0.0);
        let r = b(0, 0, 500, 500).iou_ratio(&b(250, 250, 750, 750));
        assert_eq!(r, (62_500, 437_500));
        assert!((b(0, 0, 500, 500).iou(&b(250, 250, 750, 750)) - 62_500.0 / 437_500.0).abs() < 1e-12);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(b(0, 0, 10, 10).intersection_area(&b(10, 0, 20, 10)), 0);
    }

    #[test]
    fn contains_examples() {
        assert!(b(300, 500, 700, 900).contains(&b(350, 550, 650, 650), 0));
        assert!(BBox::full().contains(&b(16, 136, 792, 984), 0));
        assert!(!b(0, 0, 10, 10).contains(&b(5, 5, 15, 15), 0));
        assert!(b(0, 0, 10, 10).contains(&b(5, 5, 15, 15), 5));
    }

    #[test]
    fn center_examples() {
        assert_eq!(BBox::full().center(), (500.0, 500.0));
        assert_eq!(b(250, 450, 350, 650).center(), (300.0, 550.0));
        assert_eq!(b(450, 400, 550, 600).center(), (500.0, 500.0));
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(0.0, 0.0, 1.0, 1.0), BBox::full());
        assert_eq!(quantize(0.376, 0.336, 0.744, 0.696), b(376, 336, 744, 696));
        assert_eq!(quantize(0.5, 0.5, 0.5, 0.5), b(500, 500, 501, 501));
        assert_eq!(quantize(1.0, 1.0, 1.0, 1.0), b(999, 999, 1000, 1000));
        assert_eq!(quantize(0.0005, -3.0, 2.0, f64::NAN), b(1, 0, 1000, 1));
    }

    #[test]
    fn invalid_boxes_are_rejected() {
        assert_eq!(BBox::new(0, 0, 0, 10), Err(GeometryError::Degenerate([0, 0, 0, 10])));
        assert_eq!(BBox::new(0, 0, 1001, 10), Err(GeometryError::OutOfRange(1001)));
        assert_eq!(BBox::new(-1, 0, 5, 10), Err(GeometryError::OutOfRange(-1)));
    }

    #[test]
    fn serde_uses_literal_array_form() {
        let a = b(128, 120, 968, 920);
        assert_eq!(serde_json::to_string(&a).unwrap(), "[128,120,968,920]");
        assert_eq!(serde_json::from_str::<BBox>("[128, 120, 968, 920]").unwrap(), a);
        assert!(serde_json::from_str::<BBox>("[5, 5, 5, 9]").is_err());
        assert_eq!(a.to_string(), "[128, 120, 968, 920]");
    }

    #[test]
    fn translation_clamps_to_canvas() {
        let a = b(900, 0, 1000, 100);
        assert_eq!(a.translated(50, -20), a);
        assert_eq!(a.translated(-100, 30), b(800, 30, 900, 130));
    }
}
