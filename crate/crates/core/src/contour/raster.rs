use super::BinaryMask;
use crate::error::{Error, Result};

/// Pixels whose center lies within this distance of an edge count as
/// boundary pixels.
const BOUNDARY_RADIUS: f64 = 0.5;

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dr, dc) = (b.0 - a.0, b.1 - a.1);
    let len2 = dr * dr + dc * dc;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dr + (p.1 - a.1) * dc) / len2).clamp(0.0, 1.0)
    };
    (p.0 - a.0 - t * dr).hypot(p.1 - a.1 - t * dc)
}

/// Even-odd rule with a horizontal ray towards +col.
fn inside(p: (f64, f64), poly: &[(f64, f64)]) -> bool {
    let mut odd = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a.0 > p.0) != (b.0 > p.0) {
            let col = a.1 + (p.0 - a.0) / (b.0 - a.0) * (b.1 - a.1);
            if p.1 < col {
                odd = !odd;
            }
        }
    }
    odd
}

/// Rasterize the closed polygon through `points` (pixel-index coordinates,
/// in order). A pixel is set when its center is inside by the even-odd rule
/// or lies on the outline.
pub fn points_to_mask(points: &[(f64, f64)], height: usize, width: usize) -> Result<BinaryMask> {
    if points.len() < 3 {
        return Err(Error::DegeneratePolygon(points.len()));
    }
    let mut mask = BinaryMask::new(height, width);
    if height == 0 || width == 0 {
        return Ok(mask);
    }
    let (mut r0, mut r1, mut c0, mut c1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(r, c) in points {
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(c);
        c1 = c1.max(c);
    }
    let lo = |v: f64| (v - 1.0).floor().max(0.0) as usize;
    let hi = |v: f64, n: usize| ((v + 1.0).ceil().max(0.0) as usize).min(n - 1);
    if r1 < -1.0 || c1 < -1.0 {
        return Ok(mask);
    }
    let n = points.len();
    for r in lo(r0)..=hi(r1, height) {
        for c in lo(c0)..=hi(c1, width) {
            let p = (r as f64, c as f64);
            let on_edge = (0..n).any(|i| segment_distance(p, points[i], points[(i + 1) % n]) <= BOUNDARY_RADIUS);
            if on_edge || inside(p, points) {
                mask.set(r, c, true);
            }
        }
    }
    Ok(mask)
}
