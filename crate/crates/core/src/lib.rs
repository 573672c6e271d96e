//! Linear mixed models for repeated body-weight measurements.
//!
//! The pipeline runs wide table → long records ([`dataio`]) → design matrices
//! from a formula ([`formula`]) → covariance structure ([`covstruct`]) →
//! profiled ML/REML fit ([`engine`]) → contrasts and tests ([`inference`]) →
//! residuals and random effects ([`diagnostics`]). [`oracle`] simulates data
//! and re-derives the likelihood densely for cross-checks.

pub mod covstruct;
pub mod dataio;
pub mod diagnostics;
pub mod engine;
pub mod formula;
pub mod inference;
pub mod oracle;
pub mod report;

pub use covstruct::{CovarianceStructure, StructureKind};
pub use dataio::{LongDataset, Record};
pub use engine::{fit, fit_design, FitOptions, FittedModel, Method, ModelSpec};
pub use formula::{build_design, parse_formula, DesignSet, FormulaAst};

use thiserror::Error;

/// Failure category, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] dataio::DataError),
    #[error(transparent)]
    Formula(#[from] formula::FormulaError),
    #[error(transparent)]
    Covariance(#[from] covstruct::CovError),
    #[error(transparent)]
    Engine(#[from] engine::EngineError),
    #[error(transparent)]
    Inference(#[from] inference::InferenceError),
    #[error(transparent)]
    Diagnostics(#[from] diagnostics::DiagnosticsError),
    #[error(transparent)]
    Oracle(#[from] oracle::OracleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use engine::EngineError as E;
        match self {
            Error::Data(_) | Error::Io(_) => ErrorKind::Data,
            Error::Formula(formula::FormulaError::RankDeficient { .. }) => ErrorKind::Data,
            Error::Formula(_) => ErrorKind::Usage,
            Error::Engine(E::Design(formula::FormulaError::RankDeficient { .. })) => {
                ErrorKind::Data
            }
            Error::Engine(E::Design(_)) => ErrorKind::Usage,
            Error::Engine(E::TooFewObservations { .. }) => ErrorKind::Data,
            Error::Inference(inference::InferenceError::NotNested(_))
            | Error::Inference(inference::InferenceError::MethodMismatch(_))
            | Error::Inference(inference::InferenceError::LayoutMismatch(_))
            | Error::Inference(inference::InferenceError::UnknownGroup(_)) => ErrorKind::Usage,
            Error::Oracle(oracle::OracleError::TooLarge(_))
            | Error::Oracle(oracle::OracleError::TooFewReps(_))
            | Error::Oracle(oracle::OracleError::Layout(_)) => ErrorKind::Usage,
            _ => ErrorKind::Numerical,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
