use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid panel: {0}")]
    InvalidPanel(String),

    #[error(
        "rank-deficient factors: Gram matrix condition number {condition:.3e} exceeds {bound:.0e}; \
         near-null column combination {direction:?}"
    )]
    RankDeficient {
        condition: f64,
        bound: f64,
        direction: Vec<f64>,
    },

    #[error("degenerate: factors span the intercept; intercept not identifiable (omega_T = {omega_t:.3e})")]
    InterceptNotIdentifiable { omega_t: f64 },

    #[error("rank-deficient restricted fit on {kept} retained rows")]
    RestrictedRankDeficient { kept: usize },

    #[error("degenerate asset {asset}: zero residual variance")]
    DegenerateAsset { asset: usize },

    #[error("insufficient degrees of freedom: {0}")]
    InsufficientDof(String),

    #[error("GRS requires N < T - p (N = {n}, T = {t}, p = {p})")]
    GrsDimension { n: usize, t: usize, p: usize },

    #[error("degenerate observation at row {row}: exactly zero")]
    DegenerateObservation { row: usize },

    #[error("degenerate radius at row {row}")]
    DegenerateRadius { row: usize },

    #[error(
        "fixed point did not converge after {iterations} iterations \
         (location residual {residual_location:.3e}, scale residual {residual_scale:.3e})"
    )]
    NonConvergence {
        iterations: usize,
        residual_location: f64,
        residual_scale: f64,
    },

    #[error("half-sample fit is rank deficient for pair ({t1}, {t2})")]
    HalfSampleRankDeficient { t1: usize, t2: usize },

    #[error("tr(R^2) estimate is not positive ({value})")]
    NonPositiveTrace { value: f64 },

    #[error("p-value underflow; clamp upstream")]
    PValueUnderflow,

    #[error("study aborted: {failures} of {reps} replications failed")]
    StudyAborted { failures: usize, reps: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("date mismatch at period {period}: {message}")]
    DateMismatch { period: String, message: String },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Clone for Error {
    fn clone(&self) -> Self {
        match self {
            Error::InvalidArgument(m) => Error::InvalidArgument(m.clone()),
            Error::InvalidPanel(m) => Error::InvalidPanel(m.clone()),
            Error::RankDeficient {
                condition,
                bound,
                direction,
            } => Error::RankDeficient {
                condition: *condition,
                bound: *bound,
                direction: direction.clone(),
            },
            Error::InterceptNotIdentifiable { omega_t } => {
                Error::InterceptNotIdentifiable { omega_t: *omega_t }
            }
            Error::RestrictedRankDeficient { kept } => {
                Error::RestrictedRankDeficient { kept: *kept }
            }
            Error::DegenerateAsset { asset } => Error::DegenerateAsset { asset: *asset },
            Error::InsufficientDof(m) => Error::InsufficientDof(m.clone()),
            Error::GrsDimension { n, t, p } => Error::GrsDimension {
                n: *n,
                t: *t,
                p: *p,
            },
            Error::DegenerateObservation { row } => Error::DegenerateObservation { row: *row },
            Error::DegenerateRadius { row } => Error::DegenerateRadius { row: *row },
            Error::NonConvergence {
                iterations,
                residual_location,
                residual_scale,
            } => Error::NonConvergence {
                iterations: *iterations,
                residual_location: *residual_location,
                residual_scale: *residual_scale,
            },
            Error::HalfSampleRankDeficient { t1, t2 } => {
                Error::HalfSampleRankDeficient { t1: *t1, t2: *t2 }
            }
            Error::NonPositiveTrace { value } => Error::NonPositiveTrace { value: *value },
            Error::PValueUnderflow => Error::PValueUnderflow,
            Error::StudyAborted { failures, reps } => Error::StudyAborted {
                failures: *failures,
                reps: *reps,
            },
            // io::Error is not Clone; keep its kind and message.
            Error::Io { path, source } => Error::Io {
                path: path.clone(),
                source: std::io::Error::new(source.kind(), source.to_string()),
            },
            Error::Parse {
                path,
                row,
                column,
                message,
            } => Error::Parse {
                path: path.clone(),
                row: *row,
                column: column.clone(),
                message: message.clone(),
            },
            Error::DateMismatch { period, message } => Error::DateMismatch {
                period: period.clone(),
                message: message.clone(),
            },
            Error::Format { path, message } => Error::Format {
                path: path.clone(),
                message: message.clone(),
            },
        }
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) => ErrorKind::Usage,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::DateMismatch { .. }
            | Error::Format { .. }
            | Error::InvalidPanel(_) => ErrorKind::Data,
            _ => ErrorKind::Numerical,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
