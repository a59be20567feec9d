//! Axis-aligned boxes in continuous image coordinates.
//!
//! Boxes use the corner form `(x1, y1, x2, y2)` and area is `(x2 - x1) * (y2 - y1)`,
//! without the legacy "+1" pixel convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite box coordinates ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::EmptyBox(format!(
                "({x1}, {y1}, {x2}, {y2}) has no positive area"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from its center and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
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

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Whether the box lies inside `[0, w] x [0, h]`.
    pub fn within(&self, w: f64, h: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= w && self.y2 <= h
    }

    /// Lexicographic order on `(x1, y1, x2, y2)`, used to break score ties.
    pub fn lex_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.to_array()
            .iter()
            .zip(other.to_array().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
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

/// Intersection over union. Symmetric, in `[0, 1]`, and zero for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Clamps a box to `[0, w] x [0, h]`; fails when nothing of the box remains.
pub fn clip_box(b: &BoundingBox, w: f64, h: f64) -> Result<BoundingBox> {
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::Domain(format!("clip extent {w}x{h} must be positive")));
    }
    BoundingBox::new(
        b.x1.clamp(0.0, w),
        b.y1.clamp(0.0, h),
        b.x2.clamp(0.0, w),
        b.y2.clamp(0.0, h),
    )
    .map_err(|_| Error::EmptyBox(format!("{:?} lies outside {w}x{h}", b.to_array())))
}
