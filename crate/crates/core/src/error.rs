use std::path::PathBuf;

use crate::numerics::NumericsError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid {field}: {reason}")]
    InvalidConfig {
        module: &'static str,
        field: String,
        reason: String,
    },
    #[error("PGM parse error at byte {offset}: {msg}")]
    Pgm { offset: usize, msg: String },
    #[error("{module}: {msg}")]
    Data { module: &'static str, msg: String },
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        module: &'static str,
        step: usize,
        reason: String,
    },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn config(module: &'static str, field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            module,
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn data(module: &'static str, msg: impl Into<String>) -> Self {
        Error::Data {
            module,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.to_string(),
        }
    }

    /// Module-qualified error code, e.g. `numerics::non-finite`.
    pub fn code(&self) -> String {
        match self {
            Error::Numerics(e) => match e {
                NumericsError::ShapeMismatch { .. }
                | NumericsError::NotMatrix { .. }
                | NumericsError::BadLength { .. } => "numerics::shape".into(),
                NumericsError::NonFinite { .. } => "numerics::non-finite".into(),
                NumericsError::NotScalar(_) => "numerics::not-scalar".into(),
                NumericsError::ForeignGraph { .. } => "numerics::foreign-graph".into(),
                NumericsError::Format(_) | NumericsError::Io(_) => "numerics::format".into(),
            },
            Error::InvalidConfig { module, .. } => format!("{module}::invalid-config"),
            Error::Pgm { .. } => "phantoms::pgm".into(),
            Error::Data { module, .. } => format!("{module}::data"),
            Error::Diverged { module, .. } => format!("{module}::diverged"),
            Error::Io { .. } => "io".into(),
            Error::Format { .. } => "io::format".into(),
        }
    }

    /// Non-finite values and training divergence.
    pub fn is_numeric_fault(&self) -> bool {
        match self {
            Error::Numerics(e) => e.is_numeric_fault(),
            Error::Diverged { .. } => true,
            _ => false,
        }
    }
}
