use alloc::string::String;
use core::fmt;

/// Errors surfaced by operations with a contract on bad input; internal
/// shape plumbing uses asserts instead.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Input contained NaN or infinity where finite values are required.
    NonFinite { context: String },
    /// A tensor/vector width or count did not match what the operation needs.
    ShapeMismatch { context: String },
    /// An argument violated its documented range or structure.
    InvalidArgument { context: String },
    /// Scalar function evaluated twice gave different values.
    NonDeterministic { context: String },
    /// A tracklet with zero frames cannot be sampled.
    EmptyTracklet,
    /// Triplet mining needs at least two distinct labels in the batch.
    SingleClassBatch,
    /// A batch label has no corresponding class center.
    MissingCenter { class: usize },
    /// Every query lost all of its gallery candidates under the
    /// cross-camera exclusion rule.
    AllQueriesDropped,
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::NonFinite { context } => write!(f, "non-finite value: {context}"),
            CoreError::ShapeMismatch { context } => write!(f, "shape mismatch: {context}"),
            CoreError::InvalidArgument { context } => write!(f, "invalid argument: {context}"),
            CoreError::NonDeterministic { context } => {
                write!(f, "function is not deterministic: {context}")
            }
            CoreError::EmptyTracklet => write!(f, "tracklet has no frames"),
            CoreError::SingleClassBatch => {
                write!(f, "batch contains a single identity; no negatives to mine")
            }
            CoreError::MissingCenter { class } => {
                write!(f, "no center registered for class {class}")
            }
            CoreError::AllQueriesDropped => {
                write!(f, "no query kept a valid positive after cross-camera filtering")
            }
        }
    }
}

impl core::error::Error for CoreError {}

impl CoreError {
    pub fn non_finite(context: impl Into<String>) -> Self {
        CoreError::NonFinite {
            context: context.into(),
        }
    }

    pub fn shape(context: impl Into<String>) -> Self {
        CoreError::ShapeMismatch {
            context: context.into(),
        }
    }

    pub fn invalid(context: impl Into<String>) -> Self {
        CoreError::InvalidArgument {
            context: context.into(),
        }
    }
}
