use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::BinaryMask;
use crate::error::{Error, Result};

static MULTI_COMPONENT_MASKS: AtomicUsize = AtomicUsize::new(0);

/// Number of masks traced so far that had more than one component.
pub fn multi_component_warnings() -> usize {
    MULTI_COMPONENT_MASKS.load(Ordering::Relaxed)
}

/// Clockwise boundary of one 8-connected component, pixel-index coordinates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClosedContour {
    pub points: Vec<(usize, usize)>,
}

impl ClosedContour {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn distinct_pixels(&self) -> usize {
        let mut p = self.points.clone();
        p.sort_unstable();
        p.dedup();
        p.len()
    }

    /// Length of each closing segment, `points[i] → points[i+1 mod n]`.
    pub fn segment_lengths(&self) -> Vec<f64> {
        let n = self.points.len();
        (0..n)
            .map(|i| {
                let (a, b) = (self.points[i], self.points[(i + 1) % n]);
                let dr = a.0 as f64 - b.0 as f64;
                let dc = a.1 as f64 - b.1 as f64;
                dr.hypot(dc)
            })
            .collect()
    }

    pub fn perimeter(&self) -> f64 {
        self.segment_lengths().iter().sum()
    }
}

// Clockwise on screen (rows grow downwards), starting east.
const DIRS: [(isize, isize); 8] = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)];

fn dir_index(dr: isize, dc: isize) -> usize {
    DIRS.iter()
        .position(|&d| d == (dr, dc))
        .expect("backtrack pixel is a Moore neighbour")
}

/// Moore-neighbour boundary of the largest 8-connected component, clockwise
/// from its topmost-then-leftmost pixel. Ties between equally large
/// components go to the one whose first pixel comes first in row-major order.
pub fn trace_contour(mask: &BinaryMask) -> Result<ClosedContour> {
    let comps = mask.components();
    if comps.is_empty() {
        return Err(Error::EmptyMask);
    }
    if comps.len() > 1 {
        MULTI_COMPONENT_MASKS.fetch_add(1, Ordering::Relaxed);
        log::warn!("mask has {} components; tracing the largest only", comps.len());
    }
    let best = comps
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)))
        .map(|(_, c)| c)
        .expect("non-empty");
    let component = BinaryMask::from_pixels(mask.height(), mask.width(), best);
    Ok(trace_component(&component, best[0]))
}

fn trace_component(mask: &BinaryMask, start: (usize, usize)) -> ClosedContour {
    let start = (start.0 as isize, start.1 as isize);
    // The canonical start has background to its west.
    let (mut p, mut back) = (start, (start.0, start.1 - 1));
    let mut points = vec![(start.0 as usize, start.1 as usize)];
    let mut first_move = None;
    let limit = 4 * mask.count() + 8;
    for _ in 0..limit {
        let first = dir_index(back.0 - p.0, back.1 - p.1);
        let mut next = None;
        let mut prev = back;
        for step in 0..8 {
            let (dr, dc) = DIRS[(first + step) % 8];
            let q = (p.0 + dr, p.1 + dc);
            if mask.get_signed(q.0, q.1) {
                next = Some(q);
                break;
            }
            prev = q;
        }
        let Some(q) = next else {
            // Isolated pixel.
            break;
        };
        // Leaving the start towards the first successor again means the
        // whole boundary has been walked: the scan state repeats from here.
        if p == start && first_move == Some(q) {
            break;
        }
        first_move.get_or_insert(q);
        points.push((q.0 as usize, q.1 as usize));
        p = q;
        back = prev;
    }
    if points.len() > 1 && points.last() == points.first() {
        points.pop();
    }
    ClosedContour { points }
}
