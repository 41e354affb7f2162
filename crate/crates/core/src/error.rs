use thiserror::Error;

/// Errors raised across the tuning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in `{field}`: expected {expected}, found {found}")]
    Dimension {
        field: String,
        expected: String,
        found: String,
    },

    #[error("closed loop F - LC is not stable: eigenvalue {re:+.6}{im:+.6}i has modulus {modulus:.6} >= 1")]
    Unstable { re: f64, im: f64, modulus: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error(
        "matrix `{what}` is singular or not positive definite (condition number {condition:e})"
    )]
    Singular { what: String, condition: f64 },

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("exact enumeration needs {count} modes, above the guard of {guard}; use the iterative construction instead")]
    EnumerationGuard { count: f64, guard: usize },

    #[error("quadrature did not converge for mode {mode}: best estimate {estimate}, last change {change:e}")]
    Quadrature {
        mode: usize,
        estimate: f64,
        change: f64,
    },

    #[error("EM produced a degenerate component ({0})")]
    DegenerateCluster(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(
        field: impl Into<String>,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::Dimension {
            field: field.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad input rather than numerical trouble.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Dimension { .. }
                | Error::Domain(_)
                | Error::InvalidMixture(_)
                | Error::Config { .. }
                | Error::Io(_)
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
