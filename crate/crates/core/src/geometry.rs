//! Box arithmetic, per-pixel regression offsets, and centerness targets.
//!
//! Everything here is pure scalar math in image pixel coordinates with the
//! corner convention `(x1, y1)` = top-left, `(x2, y2)` = bottom-right.

use crate::error::{Error, Result};

/// Axis-aligned rectangle in image pixel coordinates.
///
/// Invariants: `x2 > x1`, `y2 > y1`, all coordinates finite. Enforced at
/// construction; every `Box` in the system is valid.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Box {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid(format!(
                "box coordinates must be finite, got ({x1},{y1},{x2},{y2})"
            )));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::Invalid(format!(
                "degenerate box: ({x1},{y1},{x2},{y2}) needs x2>x1 and y2>y1"
            )));
        }
        Ok(Box { x1, y1, x2, y2 })
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

    /// True if the point lies strictly inside the box.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        px > self.x1 && px < self.x2 && py > self.y1 && py < self.y2
    }

    /// Clip to `[0, w] x [0, h]`; `None` if nothing is left.
    pub fn clip(&self, w: f64, h: f64) -> Option<Box> {
        let x1 = self.x1.max(0.0);
        let y1 = self.y1.max(0.0);
        let x2 = self.x2.min(w);
        let y2 = self.y2.min(h);
        (x2 > x1 && y2 > y1).then_some(Box { x1, y1, x2, y2 })
    }
}

/// Distances from a location to the four sides of a box, in pixels.
///
/// All components are non-negative when the location lies inside the box;
/// a negative component signals "outside" to callers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LtrbOffsets {
    pub l: f64,
    pub t: f64,
    pub r: f64,
    pub b: f64,
}

impl LtrbOffsets {
    pub fn min(&self) -> f64 {
        self.l.min(self.t).min(self.r).min(self.b)
    }

    pub fn max(&self) -> f64 {
        self.l.max(self.t).max(self.r).max(self.b)
    }

    /// Reconstruct the box around the anchor point `(px, py)`.
    pub fn to_box(&self, px: f64, py: f64) -> Result<Box> {
        Box::new(px - self.l, py - self.t, px + self.r, py + self.b)
    }
}

/// Intersection over union of two boxes; 0 when disjoint.
pub fn iou(a: &Box, b: &Box) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Offsets from `(px, py)` to the four sides of `box_`.
pub fn ltrb_offsets(px: f64, py: f64, box_: &Box) -> LtrbOffsets {
    LtrbOffsets {
        l: px - box_.x1,
        t: py - box_.y1,
        r: box_.x2 - px,
        b: box_.y2 - py,
    }
}

/// Centerness target for a location strictly inside its box:
/// `sqrt((min(l,r)/max(l,r)) * (min(t,b)/max(t,b)))`.
///
/// Equals 1 exactly at the box center and decays toward the sides.
pub fn centerness_target(o: &LtrbOffsets) -> Result<f64> {
    if o.min() <= 0.0 {
        return Err(Error::Invalid(format!(
            "centerness needs strictly positive offsets, got ({},{},{},{})",
            o.l, o.t, o.r, o.b
        )));
    }
    Ok(centerness_unchecked(o))
}

/// Same as [`centerness_target`] without the positivity check; callers must
/// guarantee the location lies strictly inside the box.
pub fn centerness_unchecked(o: &LtrbOffsets) -> f64 {
    ((o.l.min(o.r) / o.l.max(o.r)) * (o.t.min(o.b) / o.t.max(o.b))).sqrt()
}
