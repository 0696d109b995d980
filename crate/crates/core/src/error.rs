use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error classes, used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("shape mismatch for {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("duplicate study id `{0}`")]
    DuplicateStudy(String),

    #[error("unknown study id `{0}`")]
    UnknownStudy(String),

    #[error("study `{study}`: label {label} out of range for {n_contrasts} contrasts")]
    LabelOutOfRange {
        study: String,
        label: usize,
        n_contrasts: usize,
    },

    #[error("study `{study}`: subject `{subject}` contributes contrast {label} more than once")]
    DuplicateContrast {
        study: String,
        subject: String,
        label: usize,
    },

    #[error("study `{study}` cannot be split: {reason}")]
    SplitInfeasible { study: String, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{stage} diverged at iteration {iteration} (loss = {value})")]
    Diverged {
        stage: String,
        iteration: usize,
        value: f64,
    },

    #[error("singular system in {0}")]
    Singular(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unsupported version: {0}")]
    Version(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn shape(what: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            what: what.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Diverged { .. } | Error::Singular(_) => ErrorClass::Numerical,
            Error::Stage { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}
