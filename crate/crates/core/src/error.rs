use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mask is not binary: value {value} at flat index {index}")]
    NonBinaryMask { value: u8, index: usize },

    #[error("RLE counts sum to {got} but size {height}x{width} needs {expected}")]
    RleCountMismatch {
        height: usize,
        width: usize,
        got: u64,
        expected: u64,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sample `{id}`: image file {} not found", path.display())]
    MissingImage { id: String, path: PathBuf },

    #[error("sample `{id}`: mask {index} is malformed: {reason}")]
    MalformedMask {
        id: String,
        index: usize,
        reason: String,
    },

    #[error("sample `{id}` has neither a caption nor masks")]
    MissingAnnotation { id: String },

    #[error("sample `{id}`: {reason}")]
    InvalidSample { id: String, reason: String },

    #[error("zero-norm {what} vector at row {row}")]
    ZeroNorm { what: &'static str, row: usize },

    #[error("scene {index}: could not place object {object} after {attempts} attempts")]
    Placement {
        index: u64,
        object: usize,
        attempts: usize,
    },

    #[error("infeasible zero-shot split: {0}")]
    InfeasibleSplit(String),

    #[error("out-of-vocabulary word `{0}`")]
    OutOfVocabulary(String),

    #[error(
        "non-finite loss at step {step} (l_g={l_g}, l_s={l_s}, tau={tau}, grad_norm={grad_norm})"
    )]
    NonFiniteLoss {
        step: u64,
        l_g: f64,
        l_s: f64,
        tau: f64,
        grad_norm: f64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
