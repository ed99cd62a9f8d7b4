use thiserror::Error;

/// Errors raised by the osnn library.
#[derive(Debug, Error)]
pub enum OsnnError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("graph is not acyclic: node {node} references node {parent}")]
    CyclicGraph { node: usize, parent: usize },

    #[error("invalid value for `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("{0} is not a power of two >= 2")]
    NotPowerOfTwo(usize),

    #[error("phase configuration does not match network: {0}")]
    ConfigMismatch(String),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("calibration failed for attenuator {device}: {reason}")]
    Calibration { device: usize, reason: String },

    #[error("chip has no calibration tables; run calibrate_devices first")]
    Uncalibrated,

    #[error("fit diverged at epoch {epoch} (loss increased 10 epochs in a row); trace: {trace:?}")]
    Divergence { epoch: usize, trace: Vec<f64> },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        last_good: Box<crate::layers::model::OsnnModel>,
    },

    #[error("IDX format error at byte offset {offset}: {reason}")]
    Idx { offset: usize, reason: String },

    #[error("missing price for component `{0}`")]
    MissingPrice(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, OsnnError>;

impl OsnnError {
    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        OsnnError::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        OsnnError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}

impl From<serde_json::Error> for OsnnError {
    fn from(e: serde_json::Error) -> Self {
        OsnnError::Serde(e.to_string())
    }
}
