use std::path::PathBuf;

use crate::losses::LossBreakdown;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("point ({row}, {col}) lies outside the box")]
    OutOfBox { row: f64, col: f64 },

    #[error("polygon needs at least 3 points, got {0}")]
    DegeneratePolygon(usize),

    #[error("shape does not fit inside a {height}x{width} image")]
    ShapeOutOfBounds { height: usize, width: usize },

    #[error("could not place instance {instance} of scene {scene_id} after {attempts} attempts")]
    PlacementFailed {
        scene_id: u64,
        instance: usize,
        attempts: usize,
    },

    #[error("malformed dataset record {record}: {message}")]
    Format { record: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate box {height}x{width}")]
    DegenerateBox { height: f64, width: f64 },

    #[error("class target {target} outside [0, {max}]")]
    Target { target: usize, max: usize },

    #[error("heatmap label channel {0} is not one-hot")]
    Label(usize),

    #[error("point count mismatch: {pred} predicted vs {truth} ground truth")]
    Count { pred: usize, truth: usize },

    #[error("annotation {0} has no contour points but the keypoint loss is enabled")]
    MissingLabels(usize),

    #[error("training diverged: non-finite loss {0:?}")]
    Diverged(LossBreakdown),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(record: impl ToString, message: impl Into<String>) -> Self {
        Error::Format {
            record: record.to_string(),
            message: message.into(),
        }
    }
}
