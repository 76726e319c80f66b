//! Fixed-count boundary point sampling: uniform arc-length spacing or
//! polygon corners, padded by seeded re-selection when the contour is too
//! short to provide `k` distinct positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BinaryMask, ClosedContour};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    Uniform,
    Corner,
}

impl std::str::FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Sampling::Uniform),
            "corner" => Ok(Sampling::Corner),
            other => Err(Error::Config(format!("unknown sampling type {other:?}"))),
        }
    }
}

impl std::fmt::Display for Sampling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Sampling::Uniform => "uniform",
            Sampling::Corner => "corner",
        })
    }
}

/// `k` ordered boundary points in pixel-index `(row, col)` coordinates plus
/// an optional object center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContourPointSet {
    pub points: Vec<(f64, f64)>,
    pub center: Option<(f64, f64)>,
    pub k: usize,
    pub sampling: Sampling,
    pub pad_count: usize,
    pub seed: u64,
}

impl ContourPointSet {
    /// Boundary points followed by the center, when present.
    pub fn keypoints(&self) -> Vec<(f64, f64)> {
        let mut out = self.points.clone();
        out.extend(self.center);
        out
    }

    pub fn num_keypoints(&self) -> usize {
        self.k + usize::from(self.center.is_some())
    }

    /// Mirror across the vertical axis of an image `width` pixels wide.
    /// Mirroring turns a clockwise walk anticlockwise, so the order is
    /// reversed and rotated to start at the topmost-then-leftmost point.
    pub fn flip_horizontal(&self, width: usize) -> ContourPointSet {
        let w = width as f64 - 1.0;
        let mut points: Vec<(f64, f64)> = self.points.iter().rev().map(|&(r, c)| (r, w - c)).collect();
        if let Some(start) = canonical_index(&points) {
            points.rotate_left(start);
        }
        ContourPointSet {
            points,
            center: self.center.map(|(r, c)| (r, w - c)),
            ..self.clone()
        }
    }
}

fn canonical_index(points: &[(f64, f64)]) -> Option<usize> {
    (0..points.len()).min_by(|&a, &b| {
        let (pa, pb) = (points[a], points[b]);
        pa.0.total_cmp(&pb.0).then(pa.1.total_cmp(&pb.1))
    })
}

/// Points at arc lengths `i·P/n`, `i = 0..n`, along the closed polyline.
fn arc_length_points(contour: &ClosedContour, n: usize) -> Vec<(f64, f64)> {
    let pts = &contour.points;
    let seg = contour.segment_lengths();
    let perimeter: f64 = seg.iter().sum();
    if pts.len() == 1 || perimeter == 0.0 {
        let p = (pts[0].0 as f64, pts[0].1 as f64);
        return vec![p; n];
    }
    let mut out = Vec::with_capacity(n);
    let mut seg_idx = 0;
    let mut seg_start = 0.0;
    for i in 0..n {
        let target = i as f64 * perimeter / n as f64;
        while seg_idx + 1 < seg.len() && seg_start + seg[seg_idx] <= target {
            seg_start += seg[seg_idx];
            seg_idx += 1;
        }
        let a = pts[seg_idx];
        let b = pts[(seg_idx + 1) % pts.len()];
        let t = if seg[seg_idx] > 0.0 {
            ((target - seg_start) / seg[seg_idx]).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push((
            a.0 as f64 + t * (b.0 as f64 - a.0 as f64),
            a.1 as f64 + t * (b.1 as f64 - a.1 as f64),
        ));
    }
    out
}

/// Grows `points` to `k` entries by seeded re-selection with replacement.
/// Each duplicate is placed right after its source so contour order holds.
/// Returns the padded list and the number of duplicates added.
fn pad_points(points: Vec<(f64, f64)>, k: usize, seed: u64) -> (Vec<(f64, f64)>, usize) {
    let missing = k.saturating_sub(points.len());
    if missing == 0 {
        return (points, 0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut copies = vec![1usize; points.len()];
    for _ in 0..missing {
        copies[rng.gen_range(0..points.len())] += 1;
    }
    let out = points
        .iter()
        .zip(&copies)
        .flat_map(|(&p, &n)| std::iter::repeat_n(p, n))
        .collect();
    (out, missing)
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("sample count k must be at least 1".into()));
    }
    Ok(())
}

/// `k` points evenly spaced in arc length from the contour's start. A contour
/// with fewer than `k` distinct pixels yields one point per distinct pixel
/// spacing, padded to `k`.
pub fn uniform_sample(contour: &ClosedContour, k: usize, seed: u64) -> Result<ContourPointSet> {
    check_k(k)?;
    if contour.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = k.min(contour.distinct_pixels());
    let (points, pad_count) = pad_points(arc_length_points(contour, n), k, seed);
    Ok(ContourPointSet {
        points,
        center: None,
        k,
        sampling: Sampling::Uniform,
        pad_count,
        seed,
    })
}

fn perpendicular_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dr, dc) = (b.0 - a.0, b.1 - a.1);
    let len = dr.hypot(dc);
    if len == 0.0 {
        return (p.0 - a.0).hypot(p.1 - a.1);
    }
    ((p.0 - a.0) * dc - (p.1 - a.1) * dr).abs() / len
}

/// Ramer–Douglas–Peucker on the open run `pts[lo..=hi]`. Retained interior
/// vertices are written to `keep` with the deviation that selected them.
fn rdp(pts: &[(f64, f64)], lo: usize, hi: usize, epsilon: f64, keep: &mut [Option<f64>]) {
    if hi <= lo + 1 {
        return;
    }
    let (mut best, mut best_d) = (lo, -1.0);
    for i in lo + 1..hi {
        let d = perpendicular_distance(pts[i], pts[lo], pts[hi]);
        if d > best_d {
            best = i;
            best_d = d;
        }
    }
    if best_d > epsilon {
        keep[best] = Some(best_d);
        rdp(pts, lo, best, epsilon, keep);
        rdp(pts, best, hi, epsilon, keep);
    }
}

/// Vertices of the RDP-simplified closed contour, in contour order, with
/// their selection deviations. The start pixel and the pixel farthest from
/// it anchor the closed polygon and rank above every other vertex.
pub fn simplify_closed(contour: &ClosedContour, epsilon: f64) -> Vec<(usize, f64)> {
    let pts: Vec<(f64, f64)> = contour.points.iter().map(|&(r, c)| (r as f64, c as f64)).collect();
    let n = pts.len();
    if n == 1 {
        return vec![(0, f64::INFINITY)];
    }
    let far = (1..n)
        .max_by(|&a, &b| {
            let da = (pts[a].0 - pts[0].0).hypot(pts[a].1 - pts[0].1);
            let db = (pts[b].0 - pts[0].0).hypot(pts[b].1 - pts[0].1);
            da.total_cmp(&db).then(b.cmp(&a))
        })
        .expect("n > 1");
    let mut keep = vec![None; n + 1];
    keep[0] = Some(f64::INFINITY);
    keep[far] = Some(f64::INFINITY);
    let mut closed = pts.clone();
    closed.push(pts[0]);
    rdp(&closed, 0, far, epsilon, &mut keep);
    rdp(&closed, far, n, epsilon, &mut keep);
    keep.truncate(n);
    keep.iter().enumerate().filter_map(|(i, d)| d.map(|d| (i, d))).collect()
}

/// Corner points of the RDP simplification at tolerance `epsilon`. More than
/// `k` candidates keeps the `k` with the largest deviation (earlier contour
/// position wins ties); fewer are padded as in [`uniform_sample`].
pub fn corner_sample(contour: &ClosedContour, k: usize, epsilon: f64, seed: u64) -> Result<ContourPointSet> {
    check_k(k)?;
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    if contour.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut corners = simplify_closed(contour, epsilon);
    if corners.len() > k {
        corners.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        corners.truncate(k);
        corners.sort_by_key(|c| c.0);
    }
    let points = corners
        .iter()
        .map(|&(i, _)| {
            let (r, c) = contour.points[i];
            (r as f64, c as f64)
        })
        .collect();
    let (points, pad_count) = pad_points(points, k, seed);
    Ok(ContourPointSet {
        points,
        center: None,
        k,
        sampling: Sampling::Corner,
        pad_count,
        seed,
    })
}

/// Settings for turning a mask into keypoint labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelConfig {
    pub k: usize,
    pub sampling: Sampling,
    pub epsilon: f64,
    pub use_center: bool,
    pub seed: u64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            k: 100,
            sampling: Sampling::Uniform,
            epsilon: 2.0,
            use_center: true,
            seed: 0,
        }
    }
}

/// Trace, sample, and optionally attach the centroid.
pub fn make_labels(mask: &BinaryMask, config: &LabelConfig) -> Result<ContourPointSet> {
    let contour = super::trace_contour(mask)?;
    let mut set = match config.sampling {
        Sampling::Uniform => uniform_sample(&contour, config.k, config.seed)?,
        Sampling::Corner => corner_sample(&contour, config.k, config.epsilon, config.seed)?,
    };
    if config.use_center {
        set.center = Some(mask.centroid()?);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contour(points: &[(usize, usize)]) -> ClosedContour {
        ClosedContour {
            points: points.to_vec(),
        }
    }

    #[test]
    fn square_lands_on_vertices() {
        let c = contour(&[(1, 1), (1, 2), (2, 2), (2, 1)]);
        let s = uniform_sample(&c, 4, 0).unwrap();
        assert_eq!(s.points, vec![(1.0, 1.0), (1.0, 2.0), (2.0, 2.0), (2.0, 1.0)]);
        assert_eq!(s.pad_count, 0);
    }

    #[test]
    fn single_pixel_pads() {
        let c = contour(&[(3, 5)]);
        let s = uniform_sample(&c, 5, 9).unwrap();
        assert_eq!(s.points, vec![(3.0, 5.0); 5]);
        assert_eq!(s.pad_count, 4);
    }

    #[test]
    fn ring_with_k_equal_to_length_returns_pixels() {
        let c = contour(&[(0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (2, 1), (2, 0), (1, 0)]);
        let s = uniform_sample(&c, 8, 0).unwrap();
        let expect: Vec<(f64, f64)> = c.points.iter().map(|&(r, c)| (r as f64, c as f64)).collect();
        assert_eq!(s.points, expect);
    }

    #[test]
    fn fractional_steps_interpolate() {
        let c = contour(&[(0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (2, 1), (2, 0), (1, 0)]);
        let s = uniform_sample(&c, 5, 0).unwrap();
        assert_eq!(s.pad_count, 0);
        let close = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12;
        assert!(close(s.points[1], (0.0, 1.6)));
        assert!(close(s.points[2], (1.2, 2.0)));
        assert!(close(s.points[4], (1.6, 0.0)));
    }

    #[test]
    fn short_contour_pads_instead_of_interpolating() {
        let c = contour(&[(0, 0), (0, 1), (1, 1), (1, 0)]);
        let s = uniform_sample(&c, 8, 0).unwrap();
        assert_eq!(s.pad_count, 4);
        let mut runs = s.points.clone();
        runs.dedup();
        assert_eq!(runs, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, 0.0)]);
    }

    #[test]
    fn padding_keeps_duplicates_adjacent() {
        let c = contour(&[(0, 0), (0, 1), (1, 1)]);
        let s = uniform_sample(&c, 7, 3).unwrap();
        assert_eq!(s.points.len(), 7);
        assert_eq!(s.pad_count, 4);
        let mut runs = s.points.clone();
        runs.dedup();
        assert_eq!(runs.len(), 3);
    }

    #[test]
    fn zero_k_rejected() {
        assert!(uniform_sample(&contour(&[(0, 0)]), 0, 0).is_err());
        assert!(corner_sample(&contour(&[(0, 0)]), 1, 0.0, 0).is_err());
    }

    #[test]
    fn rectangle_corners() {
        let m = BinaryMask::from_fn(12, 12, |r, c| (2..8).contains(&r) && (3..11).contains(&c));
        let c = super::super::trace_contour(&m).unwrap();
        let s = corner_sample(&c, 4, 1.0, 0).unwrap();
        assert_eq!(s.points, vec![(2.0, 3.0), (2.0, 10.0), (7.0, 10.0), (7.0, 3.0)]);
        assert_eq!(s.pad_count, 0);
    }

    #[test]
    fn segment_corners_are_endpoints() {
        let c = contour(&[(1, 0), (1, 1)]);
        let s = corner_sample(&c, 2, 1.0, 0).unwrap();
        assert_eq!(s.points, vec![(1.0, 0.0), (1.0, 1.0)]);
    }

    #[test]
    fn corner_padding_when_too_few() {
        let c = contour(&[(1, 0), (1, 1)]);
        let s = corner_sample(&c, 5, 1.0, 1).unwrap();
        assert_eq!(s.points.len(), 5);
        assert_eq!(s.pad_count, 3);
    }

    #[test]
    fn flip_reverses_and_reanchors() {
        let s = ContourPointSet {
            points: vec![(1.0, 1.0), (1.0, 2.0), (2.0, 2.0), (2.0, 1.0)],
            center: Some((1.5, 1.5)),
            k: 4,
            sampling: Sampling::Uniform,
            pad_count: 0,
            seed: 0,
        };
        let f = s.flip_horizontal(5);
        assert_eq!(f.points, vec![(1.0, 2.0), (1.0, 3.0), (2.0, 3.0), (2.0, 2.0)]);
        assert_eq!(f.center, Some((1.5, 2.5)));
    }
}
