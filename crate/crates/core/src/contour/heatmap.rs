use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::tensor::Tensor;

/// One-hot keypoint targets on an `M×M` grid registered to `region`.
/// Stored as the hot cell of each channel; [`HeatmapLabel::to_tensor`]
/// materializes the `[channels, M, M]` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapLabel {
    pub resolution: usize,
    pub region: Rect,
    /// `(row, col)` cell per channel, in point order with the center last.
    pub cells: Vec<(usize, usize)>,
}

impl HeatmapLabel {
    pub fn channels(&self) -> usize {
        self.cells.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        let m = self.resolution;
        let mut t = Tensor::zeros(&[self.cells.len(), m, m]);
        let data = t.data_mut();
        for (ch, &(r, c)) in self.cells.iter().enumerate() {
            data[(ch * m + r) * m + c] = 1.0;
        }
        t
    }
}

fn cell(offset: f64, extent: f64, m: usize) -> usize {
    let v = (offset / extent * m as f64).floor();
    v.clamp(0.0, (m - 1) as f64) as usize
}

/// Quantize each point to the cell of an `m×m` grid over `region`.
/// Points on the boundary are clamped onto the grid; points strictly outside
/// are an error.
pub fn encode_heatmaps(points: &[(f64, f64)], region: &Rect, m: usize) -> Result<HeatmapLabel> {
    if m == 0 || region.height <= 0.0 || region.width <= 0.0 {
        return Err(Error::DegenerateBox {
            height: region.height,
            width: region.width,
        });
    }
    let cells = points
        .iter()
        .map(|&(row, col)| {
            if !region.contains(row, col) {
                return Err(Error::OutOfBox { row, col });
            }
            Ok((
                cell(row - region.top, region.height, m),
                cell(col - region.left, region.width, m),
            ))
        })
        .collect::<Result<_>>()?;
    Ok(HeatmapLabel {
        resolution: m,
        region: *region,
        cells,
    })
}

/// Per channel, the center of the highest-scoring cell (first in row-major
/// order on ties), mapped back into the coordinates of `region`.
pub fn decode_heatmaps(grid: &Tensor, region: &Rect) -> Result<Vec<(f64, f64)>> {
    let (channels, h, w) = grid.chw()?;
    let n = h * w;
    let data = grid.data();
    Ok((0..channels)
        .map(|ch| {
            let plane = &data[ch * n..(ch + 1) * n];
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            let (r, c) = (best / w, best % w);
            (
                region.top + (r as f64 + 0.5) * region.height / h as f64,
                region.left + (c as f64 + 0.5) * region.width / w as f64,
            )
        })
        .collect())
}
