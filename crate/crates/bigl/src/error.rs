//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by data ingest, training, evaluation and reporting.
#[derive(Debug, Error)]
pub enum BiglError {
    /// An image has no nonzero support (all voxels zero), so intensity
    /// statistics and normalization are undefined.
    #[error("image is empty: no nonzero voxels")]
    EmptyImage,

    /// A label volume contains a value outside the expected scheme.
    #[error("label value {found} violates label scheme (allowed: {allowed})")]
    LabelSchemeViolation { found: i64, allowed: String },

    /// Two tensors that must agree in shape do not.
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// Volumes of one case disagree on orientation/spacing metadata.
    #[error("direction mismatch: {0}")]
    DirectionMismatch(String),

    /// A network forward pass produced NaN or infinity.
    #[error("non-finite activation in {context}")]
    NonFiniteActivation { context: String },

    /// An epoch yielded no batches (no training slices available).
    #[error("epoch produced no batches")]
    EmptyEpoch,

    /// Feature maps compared across networks live at different resolution
    /// levels.
    #[error("feature level mismatch: {0}")]
    LevelMismatch(String),

    /// Parameters that were declared frozen changed during training.
    #[error("frozen parameter contract violated: {0}")]
    FrozenContractViolation(String),

    /// A report is missing required entries.
    #[error("incomplete report: {0}")]
    IncompleteReport(String),

    /// The learning-rate schedule was queried past its final iteration.
    #[error("schedule exhausted: iteration {iter} exceeds maximum {max}")]
    ScheduleExhausted { iter: u64, max: u64 },

    /// Writing a checkpoint failed (I/O or serialization).
    #[error("checkpoint write failed: {0}")]
    CheckpointWriteError(String),

    /// A training loss became NaN or infinite.
    #[error("non-finite loss at iteration {iter} in component {component}")]
    NonFiniteLoss { iter: u64, component: String },

    /// A case directory is missing one of its required volumes.
    #[error("case {case} is incomplete: missing {missing}")]
    IncompleteCase { case: String, missing: String },

    /// A file could not be parsed or ingested.
    #[error("ingest error: {0}")]
    IngestError(String),

    /// Fewer cases were found than the requested split requires.
    #[error("insufficient cases: need at least {needed}, found {found}")]
    InsufficientCases { needed: usize, found: usize },

    /// A surface distance is undefined (a mask has no boundary).
    #[error("undefined distance: {0}")]
    UndefinedDistance(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BiglError>;
