use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Rect;

/// Binary pixel grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self { height, width, values }
    }

    /// Mask with the given `(row, col)` pixels set.
    pub fn from_pixels(height: usize, width: usize, pixels: &[(usize, usize)]) -> Self {
        let mut m = Self::new(height, width);
        for &(r, c) in pixels {
            m.set(r, c, true);
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col]
    }

    /// Out-of-range coordinates read as background.
    pub fn get_signed(&self, row: isize, col: isize) -> bool {
        row >= 0
            && col >= 0
            && (row as usize) < self.height
            && (col as usize) < self.width
            && self.get(row as usize, col as usize)
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.values[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.values.iter().any(|&v| v)
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(i, _)| (i / w, i % w))
    }

    /// Tight bounding box in continuous coordinates (pixel centers on integer
    /// positions), `None` when empty.
    pub fn bbox(&self) -> Option<Rect> {
        let mut it = self.pixels();
        let (r0, c0) = it.next()?;
        let (mut top, mut bottom, mut left, mut right) = (r0, r0, c0, c0);
        for (r, c) in it {
            bottom = bottom.max(r);
            left = left.min(c);
            right = right.max(c);
            top = top.min(r);
        }
        Some(Rect::new(
            top as f64 - 0.5,
            left as f64 - 0.5,
            (bottom - top + 1) as f64,
            (right - left + 1) as f64,
        ))
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.values.iter().zip(&other.values).filter(|(&a, &b)| a && b).count()
    }

    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let inter = self.intersection_count(other);
        let union = self.count() + other.count() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn flip_horizontal(&self) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    /// 8-connected components, each as a list of pixels in row-major order.
    /// Components are ordered by their first pixel in row-major order.
    pub fn components(&self) -> Vec<Vec<(usize, usize)>> {
        let mut label = vec![usize::MAX; self.values.len()];
        let mut out = Vec::new();
        for start in 0..self.values.len() {
            if !self.values[start] || label[start] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut comp = Vec::new();
            let mut stack = vec![start];
            label[start] = id;
            while let Some(i) = stack.pop() {
                let (r, c) = ((i / self.width) as isize, (i % self.width) as isize);
                comp.push((r as usize, c as usize));
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (nr, nc) = (r + dr, c + dc);
                        if self.get_signed(nr, nc) {
                            let j = nr as usize * self.width + nc as usize;
                            if label[j] == usize::MAX {
                                label[j] = id;
                                stack.push(j);
                            }
                        }
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Mean foreground coordinate `(row, col)` in pixel-index units.
    pub fn centroid(&self) -> Result<(f64, f64)> {
        let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
        for (r, c) in self.pixels() {
            sr += r as f64;
            sc += c as f64;
            n += 1;
        }
        if n == 0 {
            return Err(Error::EmptyMask);
        }
        Ok((sr / n as f64, sc / n as f64))
    }
}

/// Foreground centroid of `mask`; see [`BinaryMask::centroid`].
pub fn centroid(mask: &BinaryMask) -> Result<(f64, f64)> {
    mask.centroid()
}
