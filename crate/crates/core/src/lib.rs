//! Marginal and conditional hazard ratios under frailty and effect modification.

pub mod analytic;
pub mod dependence;
pub mod distributions;
pub mod error;
pub mod numeric;
pub mod simulate;
pub mod survival;

pub use analytic::{CurveSample, Estimand};
pub use dependence::{CopulaFamily, CopulaSpec};
pub use distributions::{DistributionSpec, Family};
pub use error::{Error, Result};
pub use simulate::SimConfig;
pub use survival::{Arm, BaselineHazard, Scenario};
