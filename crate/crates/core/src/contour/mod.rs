//! Contour-point labels: boundary tracing, fixed-count point sampling,
//! one-hot heatmap encoding, and polygon rasterization back to masks.

mod heatmap;
mod mask;
mod raster;
mod sample;
mod trace;

pub use heatmap::{decode_heatmaps, encode_heatmaps, HeatmapLabel};
pub use mask::{centroid, BinaryMask};
pub use raster::points_to_mask;
pub use sample::{corner_sample, make_labels, simplify_closed, uniform_sample, ContourPointSet, LabelConfig, Sampling};
pub use trace::{multi_component_warnings, trace_contour, ClosedContour};
