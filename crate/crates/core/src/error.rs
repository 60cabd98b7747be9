use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("joint {joint} ({name}) lies at the camera plane (w = {w:e})")]
    JointAtCameraPlane { joint: usize, name: String, w: f64 },

    #[error("subject behind camera: w_p = {0}")]
    SubjectBehindCamera(f64),

    #[error("degenerate reference bone (length {0:e})")]
    DegenerateReference(f64),

    #[error("degenerate body plane: |A x B| = {0:e}")]
    DegenerateBodyPlane(f64),

    #[error("degenerate ground truth: joints are collinear")]
    DegenerateGroundTruth,

    #[error("flow numerical overflow in block {block}")]
    FlowOverflow { block: usize },

    #[error("{stage} diverged at epoch {epoch}, step {step}")]
    Diverged { stage: &'static str, epoch: usize, step: usize },

    #[error("infeasible crop for record {record} after {attempts} attempts")]
    InfeasibleCrop { record: u64, attempts: usize },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version { what: &'static str, found: u32, expected: u32 },

    #[error("missing dependency: {0}")]
    MissingDependency(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for failures caused by numerics rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::JointAtCameraPlane { .. }
                | Error::SubjectBehindCamera(_)
                | Error::DegenerateReference(_)
                | Error::DegenerateBodyPlane(_)
                | Error::DegenerateGroundTruth
                | Error::FlowOverflow { .. }
                | Error::Diverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
