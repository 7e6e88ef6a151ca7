//! Closed-form estimands for independent `(U0, U1)`.
//!
//! Everything here follows from the Laplace transforms: conditioning on
//! survival to `t` tilts a latent law by `exp(-load * Λ0(t))`, and the
//! conditional mean of the tilted law is `-L'(Λ) / L(Λ)`. With a discrete
//! modifier the exposed arm is a finite mixture of tilted frailty laws; a
//! continuous modifier is integrated out numerically.

use std::fmt;
use std::io::{self, Write};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::dependence::product_moment;
use crate::distributions::DistributionSpec;
use crate::error::{check_nonneg, Error, Result};
use crate::survival::{Arm, BaselineHazard, Scenario};

/// Relative tolerance of the continuous-modifier quadrature.
const MODIFIER_QUAD_TOL: f64 = 1e-10;

/// Quantity tracked along a time grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimand {
    /// Marginal causal hazard ratio (equal to the observed one in a trial).
    Mchr,
    /// Causal hazard ratio; constant in time.
    Chr,
    /// `E[U0 | T^a >= t]`.
    CondExpFrailty(Arm),
    /// `E[U1 | T^1 >= t]`.
    CondExpModifier,
    /// `E[U0 U1 | T^1 >= t]`.
    CondExpProduct,
    /// `P(T^a >= t)`.
    Survival(Arm),
    /// `exp(E[log MCHR(T) | death observed])` as a function of follow-up.
    CoxEstimand,
}

impl Estimand {
    pub fn label(&self) -> &'static str {
        match self {
            Estimand::Mchr => "mchr",
            Estimand::Chr => "chr",
            Estimand::CondExpFrailty(Arm::Unexposed) => "cond_exp_frailty_a0",
            Estimand::CondExpFrailty(Arm::Exposed) => "cond_exp_frailty_a1",
            Estimand::CondExpModifier => "cond_exp_modifier",
            Estimand::CondExpProduct => "cond_exp_product",
            Estimand::Survival(Arm::Unexposed) => "survival_a0",
            Estimand::Survival(Arm::Exposed) => "survival_a1",
            Estimand::CoxEstimand => "cox_estimand",
        }
    }

    pub const ALL: [Estimand; 9] = [
        Estimand::Mchr,
        Estimand::Chr,
        Estimand::CondExpFrailty(Arm::Unexposed),
        Estimand::CondExpFrailty(Arm::Exposed),
        Estimand::CondExpModifier,
        Estimand::CondExpProduct,
        Estimand::Survival(Arm::Unexposed),
        Estimand::Survival(Arm::Exposed),
        Estimand::CoxEstimand,
    ];
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Estimand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimand::ALL
            .into_iter()
            .find(|e| e.label() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Estimand::ALL.iter().map(|e| e.label()).collect();
                Error::Config(format!("unknown estimand `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// An estimand evaluated on an ascending time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSample {
    pub estimand: Estimand,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub fingerprint: String,
}

impl CurveSample {
    pub fn new(estimand: Estimand, times: Vec<f64>, values: Vec<f64>, fingerprint: String) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::InvalidGrid(format!(
                "{} times but {} values",
                times.len(),
                values.len()
            )));
        }
        check_grid(&times)?;
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite value {v} in {estimand} curve")));
        }
        if let Estimand::Survival(_) = estimand {
            if values.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
                return Err(Error::InvalidGrid("survival values must lie in (0, 1]".to_string()));
            }
            if values.windows(2).any(|w| w[1] > w[0]) {
                return Err(Error::InvalidGrid("survival curve increases".to_string()));
            }
        }
        Ok(Self {
            estimand,
            times,
            values,
            fingerprint,
        })
    }

    /// Writes `t,value,estimand,scenario_hash` rows with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "t,value,estimand,scenario_hash")?;
        for (t, v) in self.times.iter().zip(&self.values) {
            writeln!(out, "{t:.16e},{v:.16e},{},{}", self.estimand, self.fingerprint)?;
        }
        Ok(())
    }
}

fn check_grid(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::InvalidGrid("empty grid".to_string()));
    }
    if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::InvalidGrid("times must be finite and >= 0".to_string()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid("times must be strictly ascending".to_string()));
    }
    Ok(())
}

/// `steps` equally spaced points from `t0` to `t1` inclusive.
pub fn linear_grid(t0: f64, t1: f64, steps: usize) -> Result<Vec<f64>> {
    if steps == 1 && t0 == t1 {
        return Ok(vec![t0]);
    }
    if steps < 2 || !(t1 > t0) {
        return Err(Error::InvalidGrid(format!("{t0}:{t1}:{steps}")));
    }
    let h = (t1 - t0) / (steps - 1) as f64;
    let mut grid: Vec<f64> = (0..steps).map(|i| t0 + i as f64 * h).collect();
    grid[steps - 1] = t1;
    check_grid(&grid)?;
    Ok(grid)
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn digest(text: &str) -> String {
    let hash = Sha256::digest(text.as_bytes());
    hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Fingerprint of a scenario alone (deterministic estimands).
pub fn scenario_fingerprint(scenario: &Scenario) -> String {
    digest(&scenario.to_config_string())
}

/// `E[U | T >= t]` when the subject's cumulative load is `cum_hazard`:
/// `-L'(Λ) / L(Λ)`.
pub fn cond_exp_given_survival(spec: &DistributionSpec, cum_hazard: f64) -> Result<f64> {
    spec.survivor_mean(cum_hazard)
}

/// MCHR with a homogeneous effect `c`: `c E[U0 | T^1 >= t] / E[U0 | T^0 >= t]`.
pub fn mchr_frailty_only(frailty: &DistributionSpec, effect_c: f64, baseline: &BaselineHazard, t: f64) -> Result<f64> {
    check_nonneg("t", t)?;
    let x = baseline.cumulative(t);
    Ok(effect_c * frailty.survivor_mean(effect_c * x)? / frailty.survivor_mean(x)?)
}

/// MCHR without frailty, where the modifier carries the effect:
/// `E[U1 | T^1 >= t]`.
pub fn mchr_modifier_only(modifier: &DistributionSpec, baseline: &BaselineHazard, t: f64) -> Result<f64> {
    check_nonneg("t", t)?;
    modifier.survivor_mean(baseline.cumulative(t))
}

/// `E[U0 U1 | T^1 >= t]` for independent `U0`, `U1` with a discrete
/// modifier and `c = 1`.
pub fn cond_exp_product(
    frailty: &DistributionSpec,
    modifier: &DistributionSpec,
    baseline: &BaselineHazard,
    t: f64,
) -> Result<f64> {
    check_nonneg("t", t)?;
    if !modifier.is_discrete() {
        return Err(Error::Unsupported(format!(
            "closed-form product expectation needs a discrete modifier, got {modifier}"
        )));
    }
    Ok(exposed_arm(frailty, modifier, 1.0, baseline.cumulative(t))?.product)
}

/// Leading-order large-`t` form of [`cond_exp_product`].
///
/// Gamma frailty: `k / Λ`; inverse Gaussian: `sqrt(μ_min λ / (2Λ))`;
/// compound Poisson: `ρην Σ p_i μ_i (ν μ_i Λ)^(-η-1)`; point mass `v`:
/// `v μ_min`. `None` for a continuous modifier.
pub fn product_asymptote(
    frailty: &DistributionSpec,
    modifier: &DistributionSpec,
    baseline: &BaselineHazard,
    t: f64,
) -> Option<f64> {
    let atoms = modifier.atoms()?;
    let mu_min = atoms.first()?.0;
    let x = baseline.cumulative(t);
    Some(match *frailty {
        DistributionSpec::Gamma { shape, .. } => shape / x,
        DistributionSpec::InverseGaussian { shape, .. } => (mu_min * shape / (2.0 * x)).sqrt(),
        DistributionSpec::CompoundPoisson { rate, shape, scale } => atoms
            .iter()
            .map(|&(mu, p)| p * mu * rate * shape * scale * (scale * mu * x).powf(-shape - 1.0))
            .sum(),
        DistributionSpec::Bhn { .. } => return None,
        DistributionSpec::Degenerate { value } => value * mu_min,
    })
}

/// Survivor-conditioned quantities of the exposed arm at cumulative
/// baseline hazard `x`.
#[derive(Debug, Clone, Copy)]
struct ExposedArm {
    ln_survival: f64,
    frailty: f64,
    modifier: f64,
    product: f64,
}

fn exposed_arm(frailty: &DistributionSpec, modifier: &DistributionSpec, c: f64, x: f64) -> Result<ExposedArm> {
    if let Some(atoms) = modifier.atoms() {
        let ln_w: Vec<f64> = atoms
            .iter()
            .map(|&(mu, p)| p.ln() + frailty.ln_laplace_unchecked(c * x * mu))
            .collect();
        let top = ln_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = ln_w.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = raw.iter().sum();
        let mut arm = ExposedArm {
            ln_survival: top + total.ln(),
            frailty: 0.0,
            modifier: 0.0,
            product: 0.0,
        };
        for (&(mu, _), w) in atoms.iter().zip(&raw) {
            let w = w / total;
            let m0 = frailty.survivor_mean_unchecked(c * x * mu);
            arm.frailty += w * m0;
            arm.modifier += w * mu;
            arm.product += w * mu * m0;
        }
        return Ok(arm);
    }
    if let DistributionSpec::Degenerate { value } = *frailty {
        let z = c * x * value;
        let m1 = modifier.survivor_mean_unchecked(z);
        return Ok(ExposedArm {
            ln_survival: modifier.ln_laplace_unchecked(z),
            frailty: value,
            modifier: m1,
            product: value * m1,
        });
    }
    // Continuous modifier: integrate the frailty closed forms over U1,
    // scaled by the Jensen lower bound L0(c x E[U1]) <= E[L0(c x U1)].
    let ln_floor = frailty.ln_laplace_unchecked(c * x * modifier.mean());
    let weight = |u: f64| (frailty.ln_laplace_unchecked(c * x * u) - ln_floor).exp();
    let m0 = |u: f64| frailty.survivor_mean_unchecked(c * x * u);
    let scale = modifier.mean().min(1.0) * frailty.mean().min(1.0);
    let tol = MODIFIER_QUAD_TOL * scale;
    let den = modifier.expectation(weight, MODIFIER_QUAD_TOL)?;
    let frailty_num = modifier.expectation(|u| weight(u) * m0(u), tol)?;
    let modifier_num = modifier.expectation(|u| weight(u) * u, tol)?;
    let product_num = modifier.expectation(|u| weight(u) * u * m0(u), tol)?;
    Ok(ExposedArm {
        ln_survival: ln_floor + den.ln(),
        frailty: frailty_num / den,
        modifier: modifier_num / den,
        product: product_num / den,
    })
}

fn require_independent(scenario: &Scenario, what: &str) -> Result<()> {
    if scenario.is_independent() {
        Ok(())
    } else {
        Err(Error::Unsupported(format!(
            "{what} for dependent (U0, U1) is a Monte Carlo estimand; use the simulation routines"
        )))
    }
}

/// `MCHR(t) = c E[U0 U1 | T^1 >= t] / E[U0 | T^0 >= t]` for independent
/// latents.
pub fn mchr(scenario: &Scenario, t: f64) -> Result<f64> {
    require_independent(scenario, "MCHR")?;
    check_nonneg("t", t)?;
    let x = scenario.baseline.cumulative(t);
    let arm = exposed_arm(&scenario.frailty, &scenario.modifier, scenario.effect_c, x)?;
    Ok(scenario.effect_c * arm.product / scenario.frailty.survivor_mean_unchecked(x))
}

/// `CHR = c E[U0 U1] / E[U0]`, using the copula product moment when the
/// latents are dependent.
pub fn chr(scenario: &Scenario) -> Result<f64> {
    let m0 = scenario.frailty.mean();
    let product = if scenario.is_independent() {
        m0 * scenario.modifier.mean()
    } else {
        product_moment(&scenario.dependence, &scenario.frailty, &scenario.modifier)?
    };
    Ok(scenario.effect_c * product / m0)
}

/// `P(T^a >= t)`: `L_{U0}(Λ0(t))` unexposed, `E[L_{U0}(c U1 Λ0(t))]` exposed.
pub fn survival_curve(scenario: &Scenario, arm: Arm, t: f64) -> Result<f64> {
    check_nonneg("t", t)?;
    let x = scenario.baseline.cumulative(t);
    match arm {
        Arm::Unexposed => Ok(scenario.frailty.ln_laplace_unchecked(x).exp()),
        Arm::Exposed => {
            require_independent(scenario, "exposed survival")?;
            if x == 0.0 {
                return Ok(1.0);
            }
            let arm = exposed_arm(&scenario.frailty, &scenario.modifier, scenario.effect_c, x)?;
            Ok(arm.ln_survival.exp())
        }
    }
}

/// Limit of the MCHR as `t → ∞` for independent latents with a discrete
/// modifier (or a point-mass frailty); `None` otherwise.
pub fn mchr_limit(scenario: &Scenario) -> Option<f64> {
    if !scenario.is_independent() {
        return None;
    }
    let c = scenario.effect_c;
    let Some(atoms) = scenario.modifier.atoms() else {
        // point-mass frailty: E[U1 | T^1 >= t] -> 0 for the continuous modifiers
        return matches!(scenario.frailty, DistributionSpec::Degenerate { .. }).then_some(0.0);
    };
    let mu_min = atoms.first()?.0;
    match scenario.frailty {
        DistributionSpec::Gamma { .. } => Some(1.0),
        DistributionSpec::InverseGaussian { .. } => Some((c * mu_min).sqrt()),
        DistributionSpec::CompoundPoisson { shape, .. } => {
            Some(c.powf(-shape) * atoms.iter().map(|&(mu, p)| p * mu.powf(-shape)).sum::<f64>())
        }
        DistributionSpec::Degenerate { .. } => Some(c * mu_min),
        DistributionSpec::Bhn { .. } => None,
    }
}

/// Evaluates an analytic estimand at one time point.
pub fn evaluate(scenario: &Scenario, estimand: Estimand, t: f64) -> Result<f64> {
    check_nonneg("t", t)?;
    let x = scenario.baseline.cumulative(t);
    match estimand {
        Estimand::Mchr => mchr(scenario, t),
        Estimand::Chr => chr(scenario),
        Estimand::CondExpFrailty(Arm::Unexposed) => Ok(scenario.frailty.survivor_mean_unchecked(x)),
        Estimand::Survival(arm) => survival_curve(scenario, arm, t),
        Estimand::CondExpFrailty(Arm::Exposed) | Estimand::CondExpModifier | Estimand::CondExpProduct => {
            require_independent(scenario, estimand.label())?;
            let arm = exposed_arm(&scenario.frailty, &scenario.modifier, scenario.effect_c, x)?;
            Ok(match estimand {
                Estimand::CondExpFrailty(_) => arm.frailty,
                Estimand::CondExpModifier => arm.modifier,
                _ => arm.product,
            })
        }
        Estimand::CoxEstimand => Err(Error::Unsupported(
            "the Cox estimand is defined through simulated death times".to_string(),
        )),
    }
}

/// Evaluates `estimand` along `times` (in parallel, output in grid order).
pub fn curve(scenario: &Scenario, estimand: Estimand, times: &[f64]) -> Result<CurveSample> {
    check_grid(times)?;
    let values = times
        .par_iter()
        .map(|&t| evaluate(scenario, estimand, t))
        .collect::<Result<Vec<f64>>>()?;
    CurveSample::new(estimand, times.to_vec(), values, scenario_fingerprint(scenario))
}
