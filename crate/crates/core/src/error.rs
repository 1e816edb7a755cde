use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum GapError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered{}", match .iteration {
        Some(it) => format!(" at iteration {it}"),
        None => String::new(),
    })]
    Divergence { iteration: Option<u64> },

    #[error("label {label} out of range for {n_classes} classes")]
    LabelRange { label: usize, n_classes: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("format error in {source_name} at {location}: {message}")]
    Format {
        source_name: String,
        location: FormatLocation,
        message: String,
    },

    #[error("parameter vectors are bound to different model specs")]
    SpecMismatch,

    #[error("insufficient trace: {0}")]
    InsufficientTrace(String),

    #[error("missing checkpoints for iterations {0:?}")]
    MissingCheckpoint(Vec<u64>),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Where in an input a [`GapError::Format`] was detected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatLocation {
    ByteOffset(u64),
    Line(usize),
}

impl std::fmt::Display for FormatLocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FormatLocation::ByteOffset(o) => write!(f, "byte offset {o}"),
            FormatLocation::Line(l) => write!(f, "line {l}"),
        }
    }
}

impl GapError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GapError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format_at_byte(name: impl Into<String>, offset: u64, msg: impl Into<String>) -> Self {
        GapError::Format {
            source_name: name.into(),
            location: FormatLocation::ByteOffset(offset),
            message: msg.into(),
        }
    }

    pub(crate) fn format_at_line(name: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        GapError::Format {
            source_name: name.into(),
            location: FormatLocation::Line(line),
            message: msg.into(),
        }
    }
}

pub type Result<T, E = GapError> = std::result::Result<T, E>;
