use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: spatial axis {axis} has odd extent {extent}; an even extent is required")]
    OddExtent {
        op: &'static str,
        axis: usize,
        extent: usize,
    },

    #[error("backward requires a scalar loss node, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("label {label} has zero frequency; merge it into a neighbouring label or drop it before computing label weights")]
    ZeroFrequency { label: usize },

    #[error("Dice value {value} for label {label} is outside (0, 1]")]
    DiceOutOfRange { label: usize, value: f64 },

    #[error("non-finite gradient entry in parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("non-finite loss at epoch {epoch}, subject `{subject}`")]
    NonFiniteLoss { epoch: usize, subject: String },

    #[error("input extent {found:?} does not match the configured extent {expected:?}")]
    ExtentMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("phantom packing infeasible after {attempts} attempts ({detail}); try a larger extent")]
    InfeasiblePhantom { attempts: usize, detail: String },

    #[error("manifest references a missing or unreadable file: {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    Mvol(#[from] MvolError),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failures while decoding an MVOL container. Each variant carries a stable code.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MvolError {
    #[error("[{}] bad magic bytes", self.code())]
    BadMagic,
    #[error("[{}] truncated header", self.code())]
    TruncatedHeader,
    #[error("[{}] malformed header: {detail}", self.code())]
    BadHeader { detail: String },
    #[error("[{}] payload size mismatch: expected {expected} bytes, found {found}", self.code())]
    PayloadSizeMismatch { expected: usize, found: usize },
    #[error("[{}] label value {value} is not below num_labels {num_labels}", self.code())]
    LabelOutOfRange { value: u8, num_labels: usize },
    #[error("[{}] expected a {expected} file, found {found}", self.code())]
    WrongKind {
        expected: &'static str,
        found: String,
    },
}

impl MvolError {
    pub fn code(&self) -> &'static str {
        match self {
            MvolError::BadMagic => "MVOL001",
            MvolError::TruncatedHeader => "MVOL002",
            MvolError::BadHeader { .. } => "MVOL003",
            MvolError::PayloadSizeMismatch { .. } => "MVOL004",
            MvolError::LabelOutOfRange { .. } => "MVOL005",
            MvolError::WrongKind { .. } => "MVOL006",
        }
    }
}
