use thiserror::Error;

/// Errors produced by the estimand, sampling and fitting routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("probability {0} outside the open interval (0, 1)")]
    ProbabilityOutOfRange(f64),

    #[error("infeasible moment combination: {0}")]
    InfeasibleMoments(String),

    #[error(
        "quadrature did not converge: estimate {estimate} with error {error_estimate} \
         (tolerance {tolerance}) after {intervals} intervals"
    )]
    QuadratureNonConvergence {
        estimate: f64,
        error_estimate: f64,
        tolerance: f64,
        intervals: usize,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("every importance weight underflows at t = {t}")]
    WeightUnderflow { t: f64 },

    #[error("no uncensored deaths in the simulated cohort")]
    NoDeaths,

    #[error("Cox fit needs at least one death per arm (unexposed {unexposed}, exposed {exposed})")]
    EmptyArm { unexposed: usize, exposed: usize },

    #[error(
        "Cox partial likelihood did not converge after {iterations} iterations \
         (last log-HR {log_hr}, score {score})"
    )]
    CoxNonConvergence {
        iterations: usize,
        log_hr: f64,
        score: f64,
    },

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_positive(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            value,
            reason: "must be finite and > 0",
        })
    }
}

pub(crate) fn check_nonneg(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            value,
            reason: "must be finite and >= 0",
        })
    }
}
