use std::path::PathBuf;

use crate::numerics::ParamStore;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range for {what} of length {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("non-finite value in {stage} at layer {layer}")]
    NonFinite { stage: &'static str, layer: usize },

    #[error("preprocessing error: {0}")]
    Preprocess(String),

    #[error("undefined cosine similarity: zero-norm {which} row {row}")]
    ZeroNorm { which: &'static str, row: usize },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("finite-difference oracle failed: non-finite objective at {param}[{coord}]")]
    Oracle { param: String, coord: usize },

    #[error("{stage} diverged at epoch {epoch}")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        last_good: Box<ParamStore>,
    },

    #[error("missing {stage} output at {}: run `eegvis {command}` first", path.display())]
    MissingStage {
        stage: &'static str,
        command: &'static str,
        path: PathBuf,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
