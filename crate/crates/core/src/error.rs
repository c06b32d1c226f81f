use thiserror::Error;

/// Errors raised by the model, solver and calibration routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("tempered-stable acceptance failed {attempts} times in a row")]
    RetryExhausted { attempts: u64 },

    #[error("inflow model is not stationary (1 - M1 = {one_minus_m1})")]
    NonStationary { one_minus_m1: f64 },

    #[error("distribution is degenerate (zero variance)")]
    DegenerateDistribution,

    #[error("Riccati coefficients blew up at t = {time} (|{coefficient}| > {cap})")]
    BlowUp { time: f64, coefficient: &'static str, cap: f64 },

    #[error("time {t} lies outside the horizon [0, {horizon}]")]
    OutOfHorizon { t: f64, horizon: f64 },

    #[error("{paths} paths cannot be split into {bundles} equal bundles")]
    IndivisibleEnsemble { paths: usize, bundles: usize },

    #[error("conjugate gradient stalled at relative residual {residual:e} after {iterations} iterations")]
    CgStalled { residual: f64, iterations: usize },

    #[error("Picard iteration did not converge after {iterations} iterations (last residual {last:e})")]
    NoConvergence { iterations: usize, last: f64, history: Vec<f64> },

    #[error("no stationary parameter set reproduces the target moments (best objective {best:e})")]
    InfeasibleFit { best: f64 },

    #[error("autocorrelation is nonpositive at lag {lag}, before the {min_lags} required lags")]
    NonPositiveAcf { lag: usize, min_lags: usize },

    #[error("design matrix is rank deficient (rank {rank} < {columns})")]
    RankDeficient { rank: usize, columns: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure(cond: bool, name: &'static str, reason: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidParameter { name, reason: reason() })
    }
}
