use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point {index} at ({x}, {y}) lies outside the {width}x{height} image")]
    PointOutOfBounds { index: usize, x: f64, y: f64, width: usize, height: usize },

    #[error("missing annotation file {0}")]
    MissingAnnotation(PathBuf),

    #[error("failed to parse {file} at line {line}, column {column}: {message}")]
    Parse { file: PathBuf, line: usize, column: usize, message: String },

    #[error("invalid dataset {path}: {message}")]
    Dataset { path: PathBuf, message: String },

    #[error("image error in {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite {component} loss at step {step}")]
    NumericalAbort {
        step: usize,
        component: String,
        /// Last finite values of every logged loss component.
        snapshot: Vec<(String, f64)>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by the input data rather than the caller.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::PointOutOfBounds { .. }
                | Error::MissingAnnotation(_)
                | Error::Parse { .. }
                | Error::Dataset { .. }
                | Error::Image { .. }
        )
    }
}
