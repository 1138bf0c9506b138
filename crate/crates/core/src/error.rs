//! Crate-wide error type.
//!
//! Every variant's display form starts with the error's name so that callers
//! (the CLI in particular) surface failures as `<Name>: <detail>`.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),

    #[error("DegenerateBatch: {0}")]
    DegenerateBatch(String),

    #[error("LabelOutOfRange: label {label} not in [0,{classes})")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("EmptyVotes: record {0} has zero total votes")]
    EmptyVotes(String),

    #[error("EmptyInput: {0}")]
    EmptyInput(String),

    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),

    #[error("IoFailure: {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("SchemaViolation: line {line}: {reason}")]
    SchemaViolation { line: usize, reason: String },

    #[error("DimensionMismatch: line {line}: {reason}")]
    DimensionMismatch { line: usize, reason: String },

    #[error("UnknownId: {0}")]
    UnknownId(String),

    #[error("InvalidBatchSize: {0}")]
    InvalidBatchSize(String),

    #[error("MissingImage: {id}: {path}")]
    MissingImage { id: String, path: String },

    #[error("DecodeFailure: {path}: {reason}")]
    DecodeFailure { path: String, reason: String },

    #[error("PlanMismatch: {0}")]
    PlanMismatch(String),

    #[error("NonFiniteLoss: {0}")]
    NonFiniteLoss(String),

    #[error("FormatViolation: {0}")]
    FormatViolation(String),

    #[error("NameMismatch: {0}")]
    NameMismatch(String),

    #[error("UnknownKey: line {line}: `{key}`")]
    UnknownKey { line: usize, key: String },

    #[error("ParseFailure: line {line}: {reason}")]
    ParseFailure { line: usize, reason: String },

    #[error("EmptySplit: {0}")]
    EmptySplit(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::IoFailure { path: path.into(), source }
    }
}
