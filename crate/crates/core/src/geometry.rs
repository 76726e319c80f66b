//! Axis-aligned rectangles and the box-regression parametrization.
//!
//! Rectangles live in continuous image coordinates with pixel `(r, c)`
//! centered on `(r, c)`, so an `H × W` image spans `[-0.5, H-0.5] ×
//! [-0.5, W-0.5]` and a tight box around pixel rows `r0..=r1` has
//! `top = r0 - 0.5` and `height = r1 - r0 + 1`.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

impl Rect {
    pub fn new(top: f64, left: f64, height: f64, width: f64) -> Self {
        Self {
            top,
            left,
            height,
            width,
        }
    }

    pub fn bottom(&self) -> f64 {
        self.top + self.height
    }

    pub fn right(&self) -> f64 {
        self.left + self.width
    }

    pub fn center(&self) -> (f64, f64) {
        (self.top + 0.5 * self.height, self.left + 0.5 * self.width)
    }

    pub fn area(&self) -> f64 {
        self.height.max(0.0) * self.width.max(0.0)
    }

    pub fn diagonal(&self) -> f64 {
        self.height.hypot(self.width)
    }

    pub fn from_center(cy: f64, cx: f64, height: f64, width: f64) -> Self {
        Self::new(cy - 0.5 * height, cx - 0.5 * width, height, width)
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let ih = (self.bottom().min(other.bottom()) - self.top.max(other.top)).max(0.0);
        let iw = (self.right().min(other.right()) - self.left.max(other.left)).max(0.0);
        let inter = ih * iw;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Contains `(row, col)` including the boundary.
    pub fn contains(&self, row: f64, col: f64) -> bool {
        row >= self.top && row <= self.bottom() && col >= self.left && col <= self.right()
    }

    /// Clamp the rectangle into the extent of a `height × width` image.
    pub fn clip(&self, height: f64, width: f64) -> Rect {
        let top = self.top.clamp(-0.5, height - 0.5);
        let left = self.left.clamp(-0.5, width - 0.5);
        let bottom = self.bottom().clamp(-0.5, height - 0.5);
        let right = self.right().clamp(-0.5, width - 0.5);
        Rect::new(top, left, bottom - top, right - left)
    }

    /// Mirror across the vertical axis of an image `image_width` wide.
    pub fn flip_horizontal(&self, image_width: f64) -> Rect {
        Rect::new(self.top, image_width - 1.0 - self.right(), self.height, self.width)
    }
}

/// Regression target `(tx, ty, tw, th)` taking `proposal` onto `target`:
/// center offsets normalized by proposal size, log-ratios of extents.
pub fn encode_deltas(proposal: &Rect, target: &Rect) -> [f64; 4] {
    let (py, px) = proposal.center();
    let (ty, tx) = target.center();
    [
        (tx - px) / proposal.width,
        (ty - py) / proposal.height,
        (target.width / proposal.width).ln(),
        (target.height / proposal.height).ln(),
    ]
}

/// Inverse of [`encode_deltas`]. Log-extent deltas are clamped so a wild
/// prediction cannot overflow.
pub fn apply_deltas(proposal: &Rect, deltas: &[f64]) -> Rect {
    const MAX_LOG: f64 = 4.135; // ln(1000 / 16)
    let (py, px) = proposal.center();
    let cx = px + deltas[0] * proposal.width;
    let cy = py + deltas[1] * proposal.height;
    let w = proposal.width * deltas[2].min(MAX_LOG).exp();
    let h = proposal.height * deltas[3].min(MAX_LOG).exp();
    Rect::from_center(cy, cx, h, w)
}
