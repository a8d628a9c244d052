//! Crate-wide error type.
//!
//! Variants are grouped by failure class so that callers (in particular the
//! CLI) can map them to distinct exit codes: configuration, input/IO,
//! numerical degeneracy, and tolerance breaches.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StgpError {
    /// Invalid configuration: bad hyper-parameter values, unknown families,
    /// inconsistent option combinations.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid numeric input (non-finite coordinates, NaNs where data must
    /// be complete, shape mismatches).
    #[error("input error: {0}")]
    Input(String),

    /// File-format problems, annotated with the offending line when known.
    #[error("parse error in {file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A state matrix has spectral radius >= 1 where a stable one is required.
    #[error("instability error: spectral radius {rho} >= 1")]
    Instability { rho: f64 },

    /// No stable, minimum-phase spectral factor exists for the requested PSD.
    #[error("spectral factorization error: {0}")]
    Factorization(String),

    /// The filter produced a non-positive innovation variance.
    #[error("numerical degeneracy in block {block} at step {step}: innovation variance {value}")]
    Degeneracy {
        block: usize,
        step: usize,
        value: f64,
    },

    /// A dense factorization failed (matrix not positive definite).
    #[error("factorization error: {0}")]
    DenseFactorization(String),

    /// Effective degrees of freedom hit NM, so the GCV denominator vanishes.
    #[error("degenerate fit: delta == NM, GCV undefined")]
    DegenerateFit,

    /// Every candidate evaluation of an optimization failed.
    #[error("optimization error: all {attempted} grid evaluations failed; first failures: {details}")]
    OptimizationFailed { attempted: usize, details: String },

    /// A verification run exceeded its stated tolerance.
    #[error("tolerance breach: {0}")]
    ToleranceBreach(String),
}

impl StgpError {
    /// Exit-code class used by the CLI: 2 config, 3 IO/input, 4 numerical,
    /// 5 tolerance breach.
    pub fn exit_code(&self) -> i32 {
        match self {
            StgpError::Config(_) | StgpError::OptimizationFailed { .. } => 2,
            StgpError::Input(_) | StgpError::Parse { .. } | StgpError::Io { .. } => 3,
            StgpError::Instability { .. }
            | StgpError::Factorization(_)
            | StgpError::Degeneracy { .. }
            | StgpError::DenseFactorization(_)
            | StgpError::DegenerateFit => 4,
            StgpError::ToleranceBreach(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, StgpError>;
