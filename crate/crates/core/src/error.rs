use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("scaling factor has not been bound to (rule, N, r)")]
    UnboundScaling,

    #[error("class label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("dataset has no class labels")]
    Unlabeled,

    #[error("no clients in the system")]
    NoClients,

    #[error("every client has diverged")]
    AllDiverged,

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("stale forward trace: {0}")]
    StaleTrace(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field,
            reason: reason.into(),
        }
    }
}
