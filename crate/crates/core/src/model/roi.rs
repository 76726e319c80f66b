use crate::autograd::Taps;
use crate::error::{Error, Result};
use crate::geometry::Rect;

/// Bilinear taps for an `out×out` grid of bin centers inside `region`
/// (image coordinates) on a feature map of `fh×fw` cells. Feature cell `u`
/// sits on image position `u·stride`, where the strided backbone
/// convolutions center it. One sample per bin, clamped to the map.
pub fn roi_taps(region: &Rect, out: usize, fh: usize, fw: usize, stride: f64) -> Result<Taps> {
    if !(region.height >= 1.0 && region.width >= 1.0) {
        return Err(Error::DegenerateBox {
            height: region.height,
            width: region.width,
        });
    }
    let mut taps = Taps::default();
    taps.offsets.push(0);
    let axis = |start: f64, extent: f64, i: usize, n: usize| -> (usize, usize, f64) {
        let v = (start + (i as f64 + 0.5) * extent / out as f64) / stride;
        let v = v.clamp(0.0, (n - 1) as f64);
        let lo = v.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, v - lo as f64)
    };
    for i in 0..out {
        let (y0, y1, ly) = axis(region.top, region.height, i, fh);
        for j in 0..out {
            let (x0, x1, lx) = axis(region.left, region.width, j, fw);
            for (idx, w) in [
                (y0 * fw + x0, (1.0 - ly) * (1.0 - lx)),
                (y0 * fw + x1, (1.0 - ly) * lx),
                (y1 * fw + x0, ly * (1.0 - lx)),
                (y1 * fw + x1, ly * lx),
            ] {
                if w != 0.0 {
                    taps.index.push(idx);
                    taps.weight.push(w);
                }
            }
            taps.offsets.push(taps.index.len());
        }
    }
    Ok(taps)
}
