use thiserror::Error;

use crate::pattern::PatternPair;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("positivity violation for stratum {pair}: the pool R >= {r}, A = 1_d is empty", r = pair.r)]
    Positivity { pair: PatternPair },

    #[error("too few records for stratum {pair}: {n_case} case / {n_pool} pool, need at least {n_min} of each")]
    InsufficientData {
        pair: PatternPair,
        n_case: usize,
        n_pool: usize,
        n_min: usize,
    },

    #[error("Newton iteration for stratum {pair} did not converge after {iterations} iterations (|score|_inf = {score_norm:.3e})")]
    NonConvergence {
        pair: PatternPair,
        iterations: usize,
        score_norm: f64,
        last_iterate: Vec<f64>,
    },

    #[error("complete separation detected for stratum {pair} (max |coef| = {max_coef:.1})")]
    Separation { pair: PatternPair, max_coef: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("degenerate value: {0}")]
    Degenerate(String),

    #[error("bootstrap unstable: {failed} of {total} replicates failed")]
    BootstrapInstability { failed: usize, total: usize },

    #[error("method `{0}` is not available for marginal parametric models: outcome regressions impose a conditional model on L that can conflict with the marginal model (congeniality); use IPW")]
    Congeniality(String),

    #[error(
        "estimating equation solver did not converge after {iterations} iterations (|score|_inf = {residual:.3e})"
    )]
    EeNonConvergence {
        iterations: usize,
        residual: f64,
        last_iterate: Vec<f64>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Coarse failure class, used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Argument(_) | Error::Config(_) | Error::Congeniality(_) => ErrorKind::Config,
            Error::Parse { .. } | Error::Schema(_) | Error::Io(_) | Error::Csv(_) => ErrorKind::Data,
            Error::Precondition(_)
            | Error::Positivity { .. }
            | Error::InsufficientData { .. }
            | Error::NonConvergence { .. }
            | Error::Separation { .. }
            | Error::Singular(_)
            | Error::EeNonConvergence { .. } => ErrorKind::Fit,
            Error::Degenerate(_) | Error::BootstrapInstability { .. } => ErrorKind::Inference,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Fit,
    Inference,
}
