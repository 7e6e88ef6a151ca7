//! Baseline hazard, scenarios, and event-time sampling.
//!
//! A subject with frailty `u0` and modifier `u1` has hazard
//! `u0 * u1^a * c^a * λ0(t)` under exposure level `a ∈ {0, 1}`, with the
//! power-law baseline `λ0(t) = b t^p`.

use std::fmt;

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dependence::{CopulaFamily, CopulaSpec};
use crate::distributions::DistributionSpec;
use crate::error::{check_nonneg, check_positive, Error, Result};

/// Binary exposure level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Unexposed,
    Exposed,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Unexposed, Arm::Exposed];

    pub fn index(self) -> u8 {
        match self {
            Arm::Unexposed => 0,
            Arm::Exposed => 1,
        }
    }

    pub fn from_index(a: u8) -> Result<Self> {
        match a {
            0 => Ok(Arm::Unexposed),
            1 => Ok(Arm::Exposed),
            _ => Err(Error::InvalidParameter {
                name: "a",
                value: a as f64,
                reason: "exposure must be 0 or 1",
            }),
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// Power-law baseline hazard `λ0(t) = b t^p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineHazard {
    #[serde(rename = "b", default = "default_scale")]
    pub scale: f64,
    #[serde(rename = "p", default = "default_power")]
    pub power: f64,
}

fn default_scale() -> f64 {
    1.0 / 20.0
}

fn default_power() -> f64 {
    2.0
}

impl Default for BaselineHazard {
    /// `λ0(t) = t² / 20`, so `Λ0(t) = t³ / 60`.
    fn default() -> Self {
        Self {
            scale: default_scale(),
            power: default_power(),
        }
    }
}

impl BaselineHazard {
    pub fn new(scale: f64, power: f64) -> Result<Self> {
        let baseline = Self { scale, power };
        baseline.validate()?;
        Ok(baseline)
    }

    pub fn validate(&self) -> Result<()> {
        check_positive("baseline.b", self.scale)?;
        check_nonneg("baseline.p", self.power)
    }

    pub fn hazard(&self, t: f64) -> f64 {
        self.scale * t.powf(self.power)
    }

    /// `Λ0(t) = b t^(p+1) / (p+1)`.
    pub fn cumulative(&self, t: f64) -> f64 {
        self.scale * t.powf(self.power + 1.0) / (self.power + 1.0)
    }

    /// `Λ0⁻¹(x) = ((p+1) x / b)^(1/(p+1))`.
    pub fn inverse_cumulative(&self, x: f64) -> f64 {
        ((self.power + 1.0) * x / self.scale).powf(1.0 / (self.power + 1.0))
    }
}

/// One instance of the structural model: latent laws, their coupling, the
/// constant exposure effect and the baseline hazard.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scenario {
    pub frailty: DistributionSpec,
    pub modifier: DistributionSpec,
    pub dependence: CopulaSpec,
    pub effect_c: f64,
    pub baseline: BaselineHazard,
}

impl Scenario {
    /// Builds and validates a scenario.
    pub fn new(
        frailty: DistributionSpec,
        modifier: DistributionSpec,
        dependence: CopulaSpec,
        effect_c: f64,
        baseline: BaselineHazard,
    ) -> Result<Self> {
        let scenario = Self {
            frailty,
            modifier,
            dependence,
            effect_c,
            baseline,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// Frailty with a homogeneous effect `c` (modifier fixed at 1).
    pub fn frailty_only(frailty: DistributionSpec, effect_c: f64) -> Result<Self> {
        Self::new(
            frailty,
            DistributionSpec::Degenerate { value: 1.0 },
            CopulaSpec::independent(),
            effect_c,
            BaselineHazard::default(),
        )
    }

    /// Effect modification without frailty; the modifier carries the effect.
    pub fn modifier_only(modifier: DistributionSpec) -> Result<Self> {
        Self::new(
            DistributionSpec::Degenerate { value: 1.0 },
            modifier,
            CopulaSpec::independent(),
            1.0,
            BaselineHazard::default(),
        )
    }

    /// Frailty and modifier coupled by `dependence`, with `c = 1`.
    pub fn joint(frailty: DistributionSpec, modifier: DistributionSpec, dependence: CopulaSpec) -> Result<Self> {
        Self::new(frailty, modifier, dependence, 1.0, BaselineHazard::default())
    }

    pub fn validate(&self) -> Result<()> {
        self.frailty.validate()?;
        self.modifier.validate()?;
        self.dependence.validate()?;
        check_positive("effect_c", self.effect_c)?;
        self.baseline.validate()
    }

    /// True when `U0` and `U1` are independent, either by construction or
    /// because one of them is a point mass.
    pub fn is_independent(&self) -> bool {
        self.dependence.is_independent()
            || matches!(self.frailty, DistributionSpec::Degenerate { .. })
            || matches!(self.modifier, DistributionSpec::Degenerate { .. })
    }

    /// Multiplier of `λ0(t)` for a subject: `u0 * (u1 c)^a`.
    pub fn load(&self, u0: f64, u1: f64, arm: Arm) -> f64 {
        match arm {
            Arm::Unexposed => u0,
            Arm::Exposed => u0 * u1 * self.effect_c,
        }
    }

    /// Parses the flat key/value scenario format (see [`Scenario::to_config_string`]).
    pub fn from_config_str(text: &str) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let dependence = match file.copula {
            CopulaFamily::Independent => {
                if file.kendall_tau != 0.0 {
                    return Err(Error::Config(
                        "kendall_tau needs copula = \"gaussian\"".to_string(),
                    ));
                }
                CopulaSpec::independent()
            }
            CopulaFamily::Gaussian => CopulaSpec::gaussian(file.kendall_tau)?,
        };
        Self::new(file.frailty, file.modifier, dependence, file.effect_c, file.baseline)
    }

    /// Writes the scenario as dotted keys, one per line, with floats in
    /// shortest round-trip form.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        push_spec(&mut out, "frailty", &self.frailty);
        push_spec(&mut out, "modifier", &self.modifier);
        let copula = match self.dependence.family {
            CopulaFamily::Independent => "independent",
            CopulaFamily::Gaussian => "gaussian",
        };
        out.push_str(&format!("copula = \"{copula}\"\n"));
        out.push_str(&format!("kendall_tau = {:?}\n", self.dependence.kendall_tau));
        out.push_str(&format!("effect_c = {:?}\n", self.effect_c));
        out.push_str(&format!("baseline.b = {:?}\n", self.baseline.scale));
        out.push_str(&format!("baseline.p = {:?}\n", self.baseline.power));
        out
    }
}

fn push_spec(out: &mut String, prefix: &str, spec: &DistributionSpec) {
    out.push_str(&format!("{prefix}.family = \"{}\"\n", spec.family_name()));
    let fields: Vec<(&str, f64)> = match *spec {
        DistributionSpec::Gamma { shape, scale } => vec![("k", shape), ("theta", scale)],
        DistributionSpec::InverseGaussian { mean, shape } => vec![("mu", mean), ("lambda", shape)],
        DistributionSpec::CompoundPoisson { rate, shape, scale } => vec![("rho", rate), ("eta", shape), ("nu", scale)],
        DistributionSpec::Bhn {
            p_benefit,
            benefit,
            p_harm,
            harm,
        } => vec![("p1", p_benefit), ("mu1", benefit), ("p2", p_harm), ("mu2", harm)],
        DistributionSpec::Degenerate { value } => vec![("v", value)],
    };
    for (name, value) in fields {
        out.push_str(&format!("{prefix}.{name} = {value:?}\n"));
    }
}

fn unit_mass() -> DistributionSpec {
    DistributionSpec::Degenerate { value: 1.0 }
}

fn one() -> f64 {
    1.0
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default = "unit_mass")]
    frailty: DistributionSpec,
    #[serde(default = "unit_mass")]
    modifier: DistributionSpec,
    #[serde(default)]
    copula: CopulaFamily,
    #[serde(default)]
    kendall_tau: f64,
    #[serde(default = "one")]
    effect_c: f64,
    #[serde(default)]
    baseline: BaselineHazard,
}

/// Event time for a given noise draw `n_t ∈ (0, 1)`:
/// `Λ0⁻¹(-ln(n_t) / load)`. A zero load (a compound-Poisson frailty at its
/// atom) never fails and gives `+∞`.
pub fn event_time_from_uniform(u0: f64, u1: f64, arm: Arm, effect_c: f64, baseline: &BaselineHazard, n_t: f64) -> f64 {
    let load = match arm {
        Arm::Unexposed => u0,
        Arm::Exposed => u0 * u1 * effect_c,
    };
    if load <= 0.0 {
        return f64::INFINITY;
    }
    baseline.inverse_cumulative(-n_t.ln() / load)
}

/// Draws `T^a` for a subject with latent values `(u0, u1)`.
pub fn sample_event_time<R: Rng + ?Sized>(
    u0: f64,
    u1: f64,
    arm: Arm,
    effect_c: f64,
    baseline: &BaselineHazard,
    rng: &mut R,
) -> f64 {
    // Open01 never returns 0, so no resampling guard is needed.
    let n_t: f64 = rng.sample(Open01);
    event_time_from_uniform(u0, u1, arm, effect_c, baseline, n_t)
}

/// `P(T^a >= t | U0 = u0, U1 = u1) = exp(-u0 u1^a c^a Λ0(t))`.
pub fn conditional_survival(u0: f64, u1: f64, arm: Arm, effect_c: f64, baseline: &BaselineHazard, t: f64) -> Result<f64> {
    check_nonneg("t", t)?;
    let load = match arm {
        Arm::Unexposed => u0,
        Arm::Exposed => u0 * u1 * effect_c,
    };
    Ok((-load * baseline.cumulative(t)).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_baseline_is_t_cubed_over_sixty() {
        let b = BaselineHazard::default();
        assert!((b.cumulative(2.0) - 8.0 / 60.0).abs() < 1e-15);
        assert!((b.hazard(2.0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn inverse_cumulative_round_trip() {
        for baseline in [BaselineHazard::default(), BaselineHazard::new(0.3, 0.0).unwrap(), BaselineHazard::new(2.0, 1.5).unwrap()] {
            let mut t = 1e-3;
            while t <= 1e3 {
                let back = baseline.inverse_cumulative(baseline.cumulative(t));
                assert!((back - t).abs() <= 1e-12 * t, "{t} -> {back}");
                t *= 1.37;
            }
        }
    }

    #[test]
    fn event_time_examples() {
        let b = BaselineHazard::default();
        let e = (-1.0f64).exp();
        let t = event_time_from_uniform(1.0, 1.0, Arm::Unexposed, 1.0, &b, e);
        assert!((t - 60f64.cbrt()).abs() < 1e-12);
        assert!((t - 3.9149).abs() < 1e-4);
        let t = event_time_from_uniform(8.0, 1.0, Arm::Unexposed, 1.0, &b, e);
        assert!((t - 7.5f64.cbrt()).abs() < 1e-12);
        assert!((t - 1.9574).abs() < 1e-4);
        assert_eq!(event_time_from_uniform(0.0, 1.0, Arm::Unexposed, 1.0, &b, e), f64::INFINITY);
    }

    #[test]
    fn conditional_survival_examples() {
        let b = BaselineHazard::default();
        assert_eq!(conditional_survival(1.0, 1.0, Arm::Unexposed, 1.0, &b, 0.0).unwrap(), 1.0);
        let s = conditional_survival(1.0, 1.0, Arm::Unexposed, 1.0, &b, 60f64.cbrt()).unwrap();
        assert!((s - (-1.0f64).exp()).abs() < 1e-14);
        let s = conditional_survival(2.0, 3.0, Arm::Exposed, 1.0, &b, 2.0).unwrap();
        assert!((s - (-0.8f64).exp()).abs() < 1e-15);
        assert!((s - 0.4493).abs() < 1e-4);
        assert!(conditional_survival(1.0, 1.0, Arm::Unexposed, 1.0, &b, -1.0).is_err());
    }

    #[test]
    fn sampled_times_pass_ks_against_conditional_survival() {
        let b = BaselineHazard::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(u0, u1, arm) in &[(1.0, 1.0, Arm::Unexposed), (2.0, 3.0, Arm::Exposed), (0.3, 5.0, Arm::Exposed)] {
            let n = 100_000;
            let mut times: Vec<f64> = (0..n).map(|_| sample_event_time(u0, u1, arm, 1.0, &b, &mut rng)).collect();
            times.sort_by(f64::total_cmp);
            let d = times
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    let f = 1.0 - conditional_survival(u0, u1, arm, 1.0, &b, t).unwrap();
                    (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
                })
                .fold(0.0, f64::max);
            // 1% critical value of the one-sample KS statistic
            assert!(d < 1.628 / (n as f64).sqrt(), "D = {d}");
        }
    }

    #[test]
    fn frailty_scaling_law() {
        let b = BaselineHazard::default();
        let m: f64 = 8.0;
        let factor = m.powf(-1.0 / (b.power + 1.0));
        for &n_t in &[0.01, 0.3, 0.9] {
            let t1 = event_time_from_uniform(1.5, 1.0, Arm::Unexposed, 1.0, &b, n_t);
            let tm = event_time_from_uniform(1.5 * m, 1.0, Arm::Unexposed, 1.0, &b, n_t);
            assert!((tm - factor * t1).abs() < 1e-12 * t1);
        }
    }

    #[test]
    fn scenario_config_round_trip() {
        let scenario = Scenario::new(
            DistributionSpec::gamma(1.0, 1.0).unwrap(),
            DistributionSpec::bhn_from_moments(0.05, 0.5, 3.0, 1.0).unwrap(),
            CopulaSpec::gaussian(0.5).unwrap(),
            1.0,
            BaselineHazard::default(),
        )
        .unwrap();
        let text = scenario.to_config_string();
        assert!(text.contains("modifier.family = \"bhn\""));
        assert_eq!(Scenario::from_config_str(&text).unwrap(), scenario);
    }

    #[test]
    fn scenario_config_defaults_and_errors() {
        let s = Scenario::from_config_str("frailty.family = \"gamma\"\nfrailty.k = 1.0\nfrailty.theta = 1.0\neffect_c = 3.0\n").unwrap();
        assert_eq!(s.baseline, BaselineHazard::default());
        assert_eq!(s.modifier, DistributionSpec::Degenerate { value: 1.0 });
        assert!(s.is_independent());
        assert!(Scenario::from_config_str("effect_c = -1.0\n").is_err());
        assert!(Scenario::from_config_str("kendall_tau = 0.5\n").is_err());
        assert!(Scenario::from_config_str("copula = \"gaussian\"\nkendall_tau = 1.5\n").is_err());
        assert!(Scenario::from_config_str("frailty.family = \"gamma\"\nfrailty.k = 1.0\nfrailty.theta = 1.0\nfrailty.mu = 2.0\n").is_err());
        assert!(Scenario::from_config_str("effect = 2.0\n").is_err());
    }
}
