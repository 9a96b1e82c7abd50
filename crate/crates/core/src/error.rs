use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced anywhere in the selection / evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("{kind} keypoint #{index} at (row {row}, col {col}) is outside the {height}x{width} image")]
    Coordinate {
        kind: &'static str,
        index: usize,
        row: i64,
        col: i64,
        height: usize,
        width: usize,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("sampling error: requested {requested} per side, available foreground={foreground}, background={background}")]
    Sampling {
        requested: usize,
        foreground: usize,
        background: usize,
    },

    #[error("annotation for image {image_id:?} has no points; sample negatives from the segmentation mask instead")]
    EmptyAnnotation { image_id: String },

    #[error("parse error at record {record}: {message}")]
    Parse { record: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Training { epoch: usize, loss: f32 },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}
