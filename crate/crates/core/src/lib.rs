//! Instance segmentation with contour-point supervision.
//!
//! A keypoint head predicts `k` ordered boundary points (plus the object
//! center) on a one-hot heatmap grid; its channel-summed output is reduced
//! to the mask resolution and fused into the mask logits. Everything needed
//! to train and evaluate that mechanism at desk scale lives here: label
//! generation from masks, synthetic scenes, the model and its gradients,
//! losses and COCO-style metrics, and the training harness.

// `!(x > 0.0)` is how validation rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod contour;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;

pub use contour::{BinaryMask, ClosedContour, ContourPointSet, HeatmapLabel, Sampling};
pub use error::{Error, Result};
pub use geometry::Rect;
pub use losses::LossBreakdown;
pub use metrics::EvalReport;
pub use model::{Design, FusionConfig, FusionMode, Model, ModelConfig, Reduction};
pub use synth::{InstanceAnnotation, SceneRecord};
pub use tensor::Tensor;
pub use train::{DetectionResult, TrainConfig};
