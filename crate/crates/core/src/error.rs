//! Crate-wide error type and the coarse classes the CLI maps to exit codes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Input violates an operation precondition (NaN logits, out-of-grid
    /// coordinate, empty layer list, ...).
    #[error("rejected input to {op}: {detail}")]
    Input { op: &'static str, detail: String },

    /// Invalid configuration; the message names the offending field.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Prompt does not follow the `background | foreground [| action]` layout.
    #[error("prompt format: {0}")]
    Prompt(String),

    /// A pass produced NaN or infinite values.
    #[error("non-finite values in {context}")]
    NonFinite { context: String },

    /// Malformed dump file; the message names the defect.
    #[error("file format: {0}")]
    Format(String),

    /// An operation ran before the state it depends on was produced.
    #[error("pipeline ordering: {0}")]
    Ordering(String),

    /// An attention hook failed; carries where it happened.
    #[error("hook failed at step {step}, layer {layer}: {source}")]
    Hook {
        step: usize,
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Error classes with distinct process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad configuration, prompt, or inputs: exit code 2.
    Config,
    /// Malformed dump files: exit code 3.
    Format,
    /// Everything else: exit code 1.
    Internal,
}

impl ErrorClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Config => "config",
            ErrorClass::Format => "format",
            ErrorClass::Internal => "internal",
        }
    }
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn input(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Input {
            op,
            detail: detail.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Shape { .. }
            | Error::Input { .. }
            | Error::Config(_)
            | Error::Prompt(_)
            | Error::Ordering(_) => ErrorClass::Config,
            Error::Format(_) => ErrorClass::Format,
            Error::Hook { source, .. } => source.class(),
            Error::NonFinite { .. } | Error::Io(_) => ErrorClass::Internal,
        }
    }
}
