//! Latent-variable laws for the frailty (`U0`) and the effect modifier (`U1`).
//!
//! Four families are supported: gamma, inverse Gaussian, compound Poisson
//! (a Poisson number of i.i.d. gamma summands, with an atom at zero), and the
//! three-atom Benefit–Harm–Neutral law. A degenerate point mass stands in for
//! an absent latent variable.
//!
//! Every family exposes its Laplace transform `L(c) = E[exp(-cX)]` together
//! with the first two derivatives. Conditional expectations given survival
//! only need the ratio `-L'(c) / L(c)`, which [`DistributionSpec::survivor_mean`]
//! evaluates directly so that it stays finite when `L(c)` itself underflows.

use std::fmt;
use std::str::FromStr;

use rand::distr::Open01;
use rand::Rng;
use rand_distr::{Distribution, Gamma, InverseGaussian, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{check_nonneg, check_positive, Error, Result};
use crate::numeric::{integrate_to_infinity, invert_cdf, normal_cdf, normal_quantile};

/// Poisson tail mass below which the compound-Poisson CDF series is cut.
const CPOI_TAIL: f64 = 1e-12;

/// Above this rate the Poisson count is drawn with `rand_distr` instead of
/// sequential inversion.
const POISSON_INVERSION_MAX_RATE: f64 = 30.0;

/// A latent-variable distribution together with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", try_from = "RawSpec")]
pub enum DistributionSpec {
    /// Gamma with shape `k` and scale `theta`.
    #[serde(rename = "gamma")]
    Gamma {
        #[serde(rename = "k")]
        shape: f64,
        #[serde(rename = "theta")]
        scale: f64,
    },
    /// Inverse Gaussian with mean `mu` and shape `lambda`.
    #[serde(rename = "invgauss")]
    InverseGaussian {
        #[serde(rename = "mu")]
        mean: f64,
        #[serde(rename = "lambda")]
        shape: f64,
    },
    /// Sum of `N ~ Poisson(rho)` i.i.d. `Gamma(eta, nu)` terms.
    #[serde(rename = "cpoisson")]
    CompoundPoisson {
        #[serde(rename = "rho")]
        rate: f64,
        #[serde(rename = "eta")]
        shape: f64,
        #[serde(rename = "nu")]
        scale: f64,
    },
    /// Benefit–Harm–Neutral: `mu1 < 1` w.p. `p1`, `mu2 >= 1` w.p. `p2`,
    /// and exactly 1 otherwise.
    #[serde(rename = "bhn")]
    Bhn {
        #[serde(rename = "p1")]
        p_benefit: f64,
        #[serde(rename = "mu1")]
        benefit: f64,
        #[serde(rename = "p2")]
        p_harm: f64,
        #[serde(rename = "mu2")]
        harm: f64,
    },
    /// Point mass at `v`.
    #[serde(rename = "degenerate")]
    Degenerate {
        #[serde(rename = "v")]
        value: f64,
    },
}

// Mirror of `DistributionSpec` used only so deserialization goes through
// `validate`.
#[derive(Deserialize)]
#[serde(tag = "family", deny_unknown_fields)]
enum RawSpec {
    #[serde(rename = "gamma")]
    Gamma { k: f64, theta: f64 },
    #[serde(rename = "invgauss")]
    InverseGaussian { mu: f64, lambda: f64 },
    #[serde(rename = "cpoisson")]
    CompoundPoisson { rho: f64, eta: f64, nu: f64 },
    #[serde(rename = "bhn")]
    Bhn { p1: f64, mu1: f64, p2: f64, mu2: f64 },
    #[serde(rename = "degenerate")]
    Degenerate { v: f64 },
}

impl TryFrom<RawSpec> for DistributionSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        let spec = match raw {
            RawSpec::Gamma { k, theta } => DistributionSpec::Gamma { shape: k, scale: theta },
            RawSpec::InverseGaussian { mu, lambda } => DistributionSpec::InverseGaussian { mean: mu, shape: lambda },
            RawSpec::CompoundPoisson { rho, eta, nu } => DistributionSpec::CompoundPoisson {
                rate: rho,
                shape: eta,
                scale: nu,
            },
            RawSpec::Bhn { p1, mu1, p2, mu2 } => DistributionSpec::Bhn {
                p_benefit: p1,
                benefit: mu1,
                p_harm: p2,
                harm: mu2,
            },
            RawSpec::Degenerate { v } => DistributionSpec::Degenerate { value: v },
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Family selector for [`DistributionSpec::from_mean_var`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    Gamma,
    InverseGaussian,
    /// Compound Poisson with the gamma summand shape fixed at 1/2.
    CompoundPoisson,
    /// BHN with the benefit probability and level held fixed.
    Bhn { p_benefit: f64, benefit: f64 },
    Degenerate,
}

impl Family {
    pub const CONTINUOUS: [Family; 3] = [Family::Gamma, Family::InverseGaussian, Family::CompoundPoisson];

    pub fn name(&self) -> &'static str {
        match self {
            Family::Gamma => "gamma",
            Family::InverseGaussian => "invgauss",
            Family::CompoundPoisson => "cpoisson",
            Family::Bhn { .. } => "bhn",
            Family::Degenerate => "degenerate",
        }
    }
}

/// Valid family names, in the order used by usage messages.
pub const FAMILY_NAMES: [&str; 5] = ["gamma", "invgauss", "cpoisson", "bhn", "degenerate"];

impl FromStr for Family {
    type Err = Error;

    /// Parses a family name. BHN comes back with placeholder benefit
    /// parameters (`p1 = 0`, `mu1 = 0.5`) that callers are expected to set.
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gamma" => Ok(Family::Gamma),
            "invgauss" | "ig" | "inverse-gaussian" => Ok(Family::InverseGaussian),
            "cpoisson" | "cpoi" | "compound-poisson" => Ok(Family::CompoundPoisson),
            "bhn" => Ok(Family::Bhn {
                p_benefit: 0.0,
                benefit: 0.5,
            }),
            "degenerate" => Ok(Family::Degenerate),
            other => Err(Error::Config(format!(
                "unknown family `{other}`; valid names: {}",
                FAMILY_NAMES.join(", ")
            ))),
        }
    }
}

impl fmt::Display for DistributionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            DistributionSpec::Gamma { shape, scale } => write!(f, "Gamma({shape}, {scale})"),
            DistributionSpec::InverseGaussian { mean, shape } => write!(f, "IG({mean}, {shape})"),
            DistributionSpec::CompoundPoisson { rate, shape, scale } => write!(f, "CPoi({rate}, {shape}, {scale})"),
            DistributionSpec::Bhn {
                p_benefit,
                benefit,
                p_harm,
                harm,
            } => write!(f, "BHN({p_benefit}, {benefit}, {p_harm}, {harm})"),
            DistributionSpec::Degenerate { value } => write!(f, "Degenerate({value})"),
        }
    }
}

impl DistributionSpec {
    pub fn gamma(shape: f64, scale: f64) -> Result<Self> {
        let spec = DistributionSpec::Gamma { shape, scale };
        spec.validate().map(|_| spec)
    }

    pub fn inverse_gaussian(mean: f64, shape: f64) -> Result<Self> {
        let spec = DistributionSpec::InverseGaussian { mean, shape };
        spec.validate().map(|_| spec)
    }

    pub fn compound_poisson(rate: f64, shape: f64, scale: f64) -> Result<Self> {
        let spec = DistributionSpec::CompoundPoisson { rate, shape, scale };
        spec.validate().map(|_| spec)
    }

    pub fn bhn(p_benefit: f64, benefit: f64, p_harm: f64, harm: f64) -> Result<Self> {
        let spec = DistributionSpec::Bhn {
            p_benefit,
            benefit,
            p_harm,
            harm,
        };
        spec.validate().map(|_| spec)
    }

    pub fn degenerate(value: f64) -> Result<Self> {
        let spec = DistributionSpec::Degenerate { value };
        spec.validate().map(|_| spec)
    }

    /// Checks the parameter constraints of the family.
    pub fn validate(&self) -> Result<()> {
        match *self {
            DistributionSpec::Gamma { shape, scale } => {
                check_positive("k", shape)?;
                check_positive("theta", scale)
            }
            DistributionSpec::InverseGaussian { mean, shape } => {
                check_positive("mu", mean)?;
                check_positive("lambda", shape)
            }
            DistributionSpec::CompoundPoisson { rate, shape, scale } => {
                check_positive("rho", rate)?;
                check_positive("eta", shape)?;
                check_positive("nu", scale)
            }
            DistributionSpec::Bhn {
                p_benefit,
                benefit,
                p_harm,
                harm,
            } => {
                check_nonneg("p1", p_benefit)?;
                check_nonneg("p2", p_harm)?;
                if p_benefit + p_harm > 1.0 + 1e-12 {
                    return Err(Error::InvalidParameter {
                        name: "p2",
                        value: p_harm,
                        reason: "p1 + p2 must not exceed 1",
                    });
                }
                check_positive("mu1", benefit)?;
                if benefit >= 1.0 {
                    return Err(Error::InvalidParameter {
                        name: "mu1",
                        value: benefit,
                        reason: "benefit level must be < 1",
                    });
                }
                if !(harm.is_finite() && harm >= 1.0) {
                    return Err(Error::InvalidParameter {
                        name: "mu2",
                        value: harm,
                        reason: "harm level must be finite and >= 1",
                    });
                }
                Ok(())
            }
            DistributionSpec::Degenerate { value } => check_positive("v", value),
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            DistributionSpec::Gamma { .. } => "gamma",
            DistributionSpec::InverseGaussian { .. } => "invgauss",
            DistributionSpec::CompoundPoisson { .. } => "cpoisson",
            DistributionSpec::Bhn { .. } => "bhn",
            DistributionSpec::Degenerate { .. } => "degenerate",
        }
    }

    /// True for laws without a density (BHN, point mass).
    pub fn is_discrete(&self) -> bool {
        matches!(self, DistributionSpec::Bhn { .. } | DistributionSpec::Degenerate { .. })
    }

    /// Support points and probabilities of a discrete law, ascending by level.
    /// Atoms with zero probability are dropped; continuous laws return `None`.
    pub fn atoms(&self) -> Option<Vec<(f64, f64)>> {
        match *self {
            DistributionSpec::Bhn {
                p_benefit,
                benefit,
                p_harm,
                harm,
            } => {
                let neutral = (1.0 - p_benefit - p_harm).max(0.0);
                let atoms = [(benefit, p_benefit), (1.0, neutral), (harm, p_harm)];
                Some(atoms.into_iter().filter(|&(_, p)| p > 0.0).collect())
            }
            DistributionSpec::Degenerate { value } => Some(vec![(value, 1.0)]),
            _ => None,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            DistributionSpec::Gamma { shape, scale } => shape * scale,
            DistributionSpec::InverseGaussian { mean, .. } => mean,
            DistributionSpec::CompoundPoisson { rate, shape, scale } => rate * shape * scale,
            DistributionSpec::Bhn {
                p_benefit,
                benefit,
                p_harm,
                harm,
            } => p_benefit * benefit + p_harm * harm + (1.0 - p_benefit - p_harm),
            DistributionSpec::Degenerate { value } => value,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            DistributionSpec::Gamma { shape, scale } => shape * scale * scale,
            DistributionSpec::InverseGaussian { mean, shape } => mean.powi(3) / shape,
            DistributionSpec::CompoundPoisson { rate, shape, scale } => rate * shape * scale * scale * (1.0 + shape),
            DistributionSpec::Bhn { .. } => {
                let m = self.mean();
                self.atoms()
                    .unwrap_or_default()
                    .iter()
                    .map(|&(x, p)| p * (x - m) * (x - m))
                    .sum()
            }
            DistributionSpec::Degenerate { .. } => 0.0,
        }
    }

    /// Builds a spec with the requested mean and variance.
    ///
    /// Gamma becomes `Gamma(m²/v, v/m)`, inverse Gaussian `IG(m, m³/v)` and
    /// compound Poisson `CPoi(3m²/v, 1/2, 2v/(3m))`. BHN delegates to
    /// [`DistributionSpec::bhn_from_moments`]; a point mass needs `v = 0`.
    pub fn from_mean_var(family: Family, mean: f64, var: f64) -> Result<Self> {
        check_positive("mean", mean)?;
        match family {
            Family::Bhn { p_benefit, benefit } => Self::bhn_from_moments(p_benefit, benefit, mean, var),
            Family::Degenerate => {
                if var != 0.0 {
                    return Err(Error::InvalidParameter {
                        name: "var",
                        value: var,
                        reason: "a point mass has zero variance",
                    });
                }
                Self::degenerate(mean)
            }
            Family::Gamma => {
                check_positive("var", var)?;
                Self::gamma(mean * mean / var, var / mean)
            }
            Family::InverseGaussian => {
                check_positive("var", var)?;
                Self::inverse_gaussian(mean, mean.powi(3) / var)
            }
            Family::CompoundPoisson => {
                check_positive("var", var)?;
                let shape = 0.5;
                Self::compound_poisson(
                    mean * mean * (1.0 + shape) / (shape * var),
                    shape,
                    var / (mean * (1.0 + shape)),
                )
            }
        }
    }

    /// Solves for the harm probability and level of a BHN law with given
    /// benefit probability `p1`, benefit level `mu1`, mean and variance.
    pub fn bhn_from_moments(p_benefit: f64, benefit: f64, mean: f64, var: f64) -> Result<Self> {
        check_nonneg("p1", p_benefit)?;
        if p_benefit > 1.0 {
            return Err(Error::InvalidParameter {
                name: "p1",
                value: p_benefit,
                reason: "probability must be <= 1",
            });
        }
        check_positive("mu1", benefit)?;
        if benefit >= 1.0 {
            return Err(Error::InvalidParameter {
                name: "mu1",
                value: benefit,
                reason: "benefit level must be < 1",
            });
        }
        check_positive("mean", mean)?;
        check_nonneg("var", var)?;

        // numerator = p2 (mu2 - 1), denominator = p2 (mu2 - 1)^2
        let numerator = mean - benefit * p_benefit + p_benefit - 1.0;
        let denominator = mean * mean - 2.0 * mean - benefit * benefit * p_benefit + 2.0 * benefit * p_benefit - p_benefit
            + var
            + 1.0;
        let scale = 1.0 + mean * mean + var;
        let tiny = 1e-14 * scale;

        if numerator.abs() <= tiny && denominator.abs() <= tiny {
            // No harmed subgroup is needed.
            return Self::bhn(p_benefit, benefit, 0.0, 1.0);
        }
        if numerator <= 0.0 {
            return Err(Error::InfeasibleMoments(format!(
                "mu2 >= 1 violated: mean {mean} is not above the benefit-only mean {} (p2 (mu2 - 1) = {numerator})",
                1.0 - p_benefit * (1.0 - benefit)
            )));
        }
        if denominator <= 0.0 {
            return Err(Error::InfeasibleMoments(format!(
                "variance {var} too small for p1 = {p_benefit}, mu1 = {benefit} (p2 (mu2 - 1)^2 = {denominator})"
            )));
        }
        let p_harm = numerator * numerator / denominator;
        let harm = (mean * mean - mean - benefit * benefit * p_benefit + benefit * p_benefit + var) / numerator;
        if p_harm > 1.0 {
            return Err(Error::InfeasibleMoments(format!("p2 in [0, 1] violated: p2 = {p_harm}")));
        }
        if p_benefit + p_harm > 1.0 + 1e-12 {
            return Err(Error::InfeasibleMoments(format!(
                "p1 + p2 <= 1 violated: p1 + p2 = {}",
                p_benefit + p_harm
            )));
        }
        if harm < 1.0 {
            return Err(Error::InfeasibleMoments(format!("mu2 >= 1 violated: mu2 = {harm}")));
        }
        Self::bhn(p_benefit, benefit, p_harm, harm.max(1.0))
    }

    fn check_argument(c: f64) -> Result<()> {
        if c.is_finite() && c >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter {
                name: "c",
                value: c,
                reason: "Laplace argument must be finite and >= 0",
            })
        }
    }

    /// `ln E[exp(-cX)]` for `c >= 0` (argument unchecked).
    pub(crate) fn ln_laplace_unchecked(&self, c: f64) -> f64 {
        match *self {
            DistributionSpec::Gamma { shape, scale } => -shape * (scale * c).ln_1p(),
            DistributionSpec::InverseGaussian { mean, shape } => {
                // (lambda/mu)(1 - s) rewritten without cancellation
                let s = (1.0 + 2.0 * mean * mean * c / shape).sqrt();
                -2.0 * mean * c / (1.0 + s)
            }
            DistributionSpec::CompoundPoisson { rate, shape, scale } => rate * (-shape * (scale * c).ln_1p()).exp_m1(),
            DistributionSpec::Bhn { .. } => {
                let atoms = self.atoms().unwrap_or_default();
                // probabilities may sum to 1 + ulp
                log_sum_exp(atoms.iter().map(|&(x, p)| p.ln() - c * x)).min(0.0)
            }
            DistributionSpec::Degenerate { value } => -c * value,
        }
    }

    /// Laplace transform `E[exp(-cX)]`.
    pub fn laplace(&self, c: f64) -> Result<f64> {
        Self::check_argument(c)?;
        Ok(self.ln_laplace_unchecked(c).exp())
    }

    /// First derivative of the Laplace transform, `-E[X exp(-cX)]`.
    pub fn laplace_d1(&self, c: f64) -> Result<f64> {
        Self::check_argument(c)?;
        Ok(-self.survivor_mean_unchecked(c) * self.ln_laplace_unchecked(c).exp())
    }

    /// Second derivative of the Laplace transform, `E[X² exp(-cX)]`.
    pub fn laplace_d2(&self, c: f64) -> Result<f64> {
        Self::check_argument(c)?;
        Ok(self.survivor_second_moment_unchecked(c) * self.ln_laplace_unchecked(c).exp())
    }

    /// `-L'(c) / L(c)`: the mean of the law exponentially tilted by `exp(-cx)`.
    pub fn survivor_mean(&self, c: f64) -> Result<f64> {
        Self::check_argument(c)?;
        Ok(self.survivor_mean_unchecked(c))
    }

    pub(crate) fn survivor_mean_unchecked(&self, c: f64) -> f64 {
        match *self {
            DistributionSpec::Gamma { shape, scale } => scale * shape / (scale * c + 1.0),
            DistributionSpec::InverseGaussian { mean, shape } => mean / (1.0 + 2.0 * mean * mean * c / shape).sqrt(),
            DistributionSpec::CompoundPoisson { rate, shape, scale } => {
                rate * shape * scale * (-(shape + 1.0) * (scale * c).ln_1p()).exp()
            }
            DistributionSpec::Bhn { .. } => tilted_moment(&self.atoms().unwrap_or_default(), c, 1),
            DistributionSpec::Degenerate { value } => value,
        }
    }

    /// `L''(c) / L(c)`: the second moment of the tilted law.
    pub(crate) fn survivor_second_moment_unchecked(&self, c: f64) -> f64 {
        match *self {
            DistributionSpec::Gamma { shape, scale } => {
                let d = scale * c + 1.0;
                scale * scale * shape * (shape + 1.0) / (d * d)
            }
            DistributionSpec::InverseGaussian { mean, shape } => {
                let s2 = 1.0 + 2.0 * mean * mean * c / shape;
                let s = s2.sqrt();
                mean * mean / s2 + mean.powi(3) / (shape * s2 * s)
            }
            DistributionSpec::CompoundPoisson { rate, shape, scale } => {
                let ln_inv = -(scale * c).ln_1p();
                let inv_eta = (shape * ln_inv).exp();
                shape * scale * scale * rate * ((shape + 2.0) * ln_inv).exp() * (shape * rate * inv_eta + shape + 1.0)
            }
            DistributionSpec::Bhn { .. } => tilted_moment(&self.atoms().unwrap_or_default(), c, 2),
            DistributionSpec::Degenerate { value } => value * value,
        }
    }

    /// Cumulative distribution function `P(X <= x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        if x.is_nan() {
            return f64::NAN;
        }
        match *self {
            DistributionSpec::Gamma { shape, scale } => {
gamma_cdf(shape, x / scale)
            }
            DistributionSpec::InverseGaussian { mean, shape } => inverse_gaussian_cdf(mean, shape, x),
            DistributionSpec::CompoundPoisson { rate, shape, scale } => {
                if x < 0.0 {
                    0.0
                } else {
                    CompoundPoissonSeries::new(rate, shape).cdf(scale, x)
                }
            }
            DistributionSpec::Bhn { .. } | DistributionSpec::Degenerate { .. } => self
                .atoms()
                .unwrap_or_default()
                .iter()
                .filter(|&&(level, _)| level <= x)
                .map(|&(_, p)| p)
                .sum::<f64>()
                .min(1.0),
        }
    }

    /// Density of the absolutely continuous part (zero for discrete laws;
    /// excludes the compound-Poisson atom at zero).
    pub fn pdf(&self, x: f64) -> f64 {
        if !(x > 0.0) || x.is_infinite() {
            return 0.0;
        }
        match *self {
            DistributionSpec::Gamma { shape, scale } => gamma_pdf(shape, scale, x),
            DistributionSpec::InverseGaussian { mean, shape } => {
                let z = x - mean;
                (shape / (2.0 * std::f64::consts::PI * x.powi(3))).sqrt() * (-shape * z * z / (2.0 * mean * mean * x)).exp()
            }
            DistributionSpec::CompoundPoisson { rate, shape, scale } => CompoundPoissonSeries::new(rate, shape).pdf(scale, x),
            DistributionSpec::Bhn { .. } | DistributionSpec::Degenerate { .. } => 0.0,
        }
    }

    /// Generalized inverse CDF `inf { x : F(x) >= u }` for `u` in `(0, 1)`.
    pub fn quantile(&self, u: f64) -> Result<f64> {
        QuantileFunction::new(self).eval(u)
    }

    /// `E[g(X)]`, by summation for discrete laws and adaptive quadrature
    /// (absolute tolerance `abs_tol`) for continuous ones.
    pub fn expectation<G: Fn(f64) -> f64>(&self, g: G, abs_tol: f64) -> Result<f64> {
        match *self {
            DistributionSpec::Gamma { shape, scale } => gamma_expectation(shape, scale, &g, abs_tol),
            DistributionSpec::InverseGaussian { mean, shape } => {
                let phi = shape / mean;
                let mode = (1.0 + 2.25 / (phi * phi)).sqrt() - 1.5 / phi;
                let density = |z: f64| {
                    if z <= 0.0 {
                        return 0.0;
                    }
                    let ln_f = 0.5 * (phi / (2.0 * std::f64::consts::PI * z.powi(3))).ln() - phi * (z - 1.0).powi(2) / (2.0 * z);
                    ln_f.exp()
                };
                integrate_to_infinity(|z| g(mean * z) * density(z), 0.0, &[mode, 4.0 * mode, 1.0], abs_tol)
            }
            DistributionSpec::CompoundPoisson { rate, shape, scale } => {
                let series = CompoundPoissonSeries::new(rate, shape);
                let tol = abs_tol / (series.terms.len() as f64 + 1.0);
                let mut total = series.zero_mass * g(0.0);
                for term in &series.terms {
                    total += term.weight * gamma_expectation(term.shape, scale, &g, tol)?;
                }
                Ok(total)
            }
            DistributionSpec::Bhn { .. } | DistributionSpec::Degenerate { .. } => {
                Ok(self.atoms().unwrap_or_default().iter().map(|&(x, p)| p * g(x)).sum())
            }
        }
    }

    /// Draws one value. Compound Poisson draws `N ~ Poisson(rho)` and then
    /// `Gamma(N eta, nu)`, returning an exact zero when `N = 0`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DistributionSpec::Gamma { shape, scale } => Gamma::new(shape, scale).expect("validated gamma").sample(rng),
            DistributionSpec::InverseGaussian { mean, shape } => {
                InverseGaussian::new(mean, shape).expect("validated inverse Gaussian").sample(rng)
            }
            DistributionSpec::CompoundPoisson { rate, shape, scale } => {
                let count = sample_poisson(rate, rng);
                if count == 0 {
                    0.0
                } else {
                    Gamma::new(count as f64 * shape, scale).expect("validated gamma").sample(rng)
                }
            }
            DistributionSpec::Bhn {
                p_benefit,
                benefit,
                p_harm,
                harm,
            } => {
                let u: f64 = rng.sample(Open01);
                if u < p_benefit {
                    benefit
                } else if u < p_benefit + p_harm {
                    harm
                } else {
                    1.0
                }
            }
            DistributionSpec::Degenerate { value } => value,
        }
    }

    /// Points where the quantile function jumps or kinks, on the probability
    /// scale (BHN cumulative levels, the compound-Poisson zero mass).
    pub fn probability_breaks(&self) -> Vec<f64> {
        match *self {
            DistributionSpec::CompoundPoisson { rate, .. } => vec![(-rate).exp()],
            DistributionSpec::Bhn { .. } => {
                let mut cumulative = 0.0;
                let atoms = self.atoms().unwrap_or_default();
                atoms[..atoms.len().saturating_sub(1)]
                    .iter()
                    .map(|&(_, p)| {
                        cumulative += p;
                        cumulative
                    })
                    .collect()
            }
            _ => Vec::new(),
        }
    }
}

/// Quantile function with per-law setup (the compound-Poisson series) done
/// once, for repeated evaluation.
pub struct QuantileFunction {
    spec: DistributionSpec,
    series: Option<CompoundPoissonSeries>,
}

impl QuantileFunction {
    pub fn new(spec: &DistributionSpec) -> Self {
        let series = match *spec {
            DistributionSpec::CompoundPoisson { rate, shape, .. } => Some(CompoundPoissonSeries::new(rate, shape)),
            _ => None,
        };
        Self { spec: *spec, series }
    }

    /// Generalized inverse CDF `inf { x : F(x) >= u }` for `u` in `(0, 1)`.
    pub fn eval(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::ProbabilityOutOfRange(u));
        }
        let spec = &self.spec;
        Ok(match *spec {
            DistributionSpec::Gamma { shape, scale } => {
                let guess = gamma_quantile_guess(shape, u) * scale;
                invert_cdf(|x| gamma_cdf(shape, x / scale), |x| gamma_pdf(shape, scale, x), u, guess)
            }
            DistributionSpec::InverseGaussian { mean, shape } => {
                let guess = lognormal_guess(mean, mean.powi(3) / shape, u);
                invert_cdf(|x| inverse_gaussian_cdf(mean, shape, x), |x| spec.pdf(x), u, guess)
            }
            DistributionSpec::CompoundPoisson { rate, scale, .. } => {
                let series = self.series.as_ref().expect("series built for compound Poisson");
                if u <= (-rate).exp() {
                    0.0
                } else {
                    let guess = lognormal_guess(spec.mean(), spec.variance(), u);
                    invert_cdf(|x| series.cdf(scale, x), |x| series.pdf(scale, x), u, guess)
                }
            }
            DistributionSpec::Bhn { .. } | DistributionSpec::Degenerate { .. } => {
                let atoms = spec.atoms().unwrap_or_default();
                let mut cumulative = 0.0;
                let mut level = atoms.last().map(|a| a.0).unwrap_or(1.0);
                for &(x, p) in &atoms {
                    cumulative += p;
                    if cumulative >= u {
                        level = x;
                        break;
                    }
                }
                level
            }
        })
    }
}

fn log_sum_exp<I: Iterator<Item = f64>>(terms: I) -> f64 {
    let terms: Vec<f64> = terms.collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// `sum p x^k e^{-cx} / sum p e^{-cx}` over atoms, shifted for stability.
fn tilted_moment(atoms: &[(f64, f64)], c: f64, power: i32) -> f64 {
    let shift = atoms.iter().map(|a| a.0).fold(f64::INFINITY, f64::min);
    let mut num = 0.0;
    let mut den = 0.0;
    for &(x, p) in atoms {
        let w = p * (-c * (x - shift)).exp();
        num += w * x.powi(power);
        den += w;
    }
    num / den
}

fn gamma_cdf(shape: f64, z: f64) -> f64 {
    if z.is_nan() {
        f64::NAN
    } else if z <= 0.0 {
        0.0
    } else if z.is_infinite() {
        1.0
    } else {
        gamma_lr(shape, z)
    }
}

fn gamma_pdf(shape: f64, scale: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    ((shape - 1.0) * x.ln() - x / scale - ln_gamma(shape) - shape * scale.ln()).exp()
}

fn inverse_gaussian_cdf(mean: f64, shape: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    let r = (shape / x).sqrt();
    let first = normal_cdf(r * (x / mean - 1.0));
    let tail = normal_cdf(-r * (x / mean + 1.0));
    let second = if tail > 0.0 {
        (2.0 * shape / mean + tail.ln()).exp()
    } else {
        0.0
    };
    (first + second).min(1.0)
}

/// Wilson–Hilferty start for the unit-scale gamma quantile, with a
/// small-`x` power law when the approximation goes negative.
fn gamma_expectation<G: Fn(f64) -> f64>(shape: f64, scale: f64, g: &G, abs_tol: f64) -> Result<f64> {
    if shape <= 1.0 {
        // y = z^k removes the z^(k-1) singularity at the origin
        let ln_norm = ln_gamma(shape + 1.0);
        let integrand = |y: f64| {
            let z = y.powf(1.0 / shape);
            g(scale * z) * (-z - ln_norm).exp()
        };
        integrate_to_infinity(integrand, 0.0, &[1.0], abs_tol)
    } else {
        let ln_norm = ln_gamma(shape);
        let integrand = |z: f64| {
            if z <= 0.0 {
                return 0.0;
            }
            g(scale * z) * ((shape - 1.0) * z.ln() - z - ln_norm).exp()
        };
        integrate_to_infinity(integrand, 0.0, &[shape - 1.0, shape], abs_tol)
    }
}

fn gamma_quantile_guess(shape: f64, u: f64) -> f64 {
    let z = normal_quantile(u);
    let a = 1.0 / (9.0 * shape);
    let wh = shape * (1.0 - a + z * a.sqrt()).powi(3);
    if wh > 0.0 && shape > 0.5 {
        wh
    } else {
        ((u.ln() + ln_gamma(shape + 1.0)) / shape).exp()
    }
}

fn lognormal_guess(mean: f64, var: f64, u: f64) -> f64 {
    let sigma2 = (var / (mean * mean)).ln_1p();
    mean * (-0.5 * sigma2 + normal_quantile(u) * sigma2.sqrt()).exp()
}

fn sample_poisson<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> u64 {
    if rate > POISSON_INVERSION_MAX_RATE {
        return Poisson::new(rate).expect("validated rate").sample(rng) as u64;
    }
    let u: f64 = rng.sample(Open01);
    let mut k = 0u64;
    let mut pmf = (-rate).exp();
    let mut cdf = pmf;
    while u > cdf {
        k += 1;
        pmf *= rate / k as f64;
        let next = cdf + pmf;
        if next == cdf {
            break;
        }
        cdf = next;
    }
    k
}

/// Poisson weights of the compound-Poisson mixture, truncated where the
/// remaining Poisson mass falls below [`CPOI_TAIL`].
struct CompoundPoissonSeries {
    zero_mass: f64,
    terms: Vec<SeriesTerm>,
}

struct SeriesTerm {
    // gamma shape n * eta
    shape: f64,
    // Poisson probability of n (renormalized)
    weight: f64,
    ln_gamma_shape_plus_one: f64,
    // index of the term whose shape is exactly one less, if any
    previous: Option<usize>,
}

impl CompoundPoissonSeries {
    fn new(rate: f64, shape: f64) -> Self {
        let zero_mass = (-rate).exp();
        let mut terms: Vec<SeriesTerm> = Vec::new();
        let mut cumulative = zero_mass;
        let ln_rate = rate.ln();
        // shapes n*eta and (n-k)*eta differ by one when k*eta == 1
        let lag = (1.0 / shape).round();
        let lag = (lag >= 1.0 && (lag * shape - 1.0).abs() < 1e-12).then_some(lag as usize);
        let mut n = 1u64;
        loop {
            let pmf = (n as f64 * ln_rate - rate - ln_gamma(n as f64 + 1.0)).exp();
            cumulative += pmf;
            let a = n as f64 * shape;
            let index = terms.len();
            terms.push(SeriesTerm {
                shape: a,
                weight: pmf,
                ln_gamma_shape_plus_one: ln_gamma(a + 1.0),
                previous: lag.and_then(|k| index.checked_sub(k)),
            });
            if (1.0 - cumulative < CPOI_TAIL && n as f64 > rate) || n > 100_000 {
                break;
            }
            n += 1;
        }
        // Spread the truncated tail over the kept terms so that F(∞) = 1.
        let kept: f64 = terms.iter().map(|t| t.weight).sum();
        let target = 1.0 - zero_mass;
        if kept > 0.0 {
            for term in &mut terms {
                term.weight *= target / kept;
            }
        }
        Self { zero_mass, terms }
    }

    /// CDF and density (per unit of `z = x / scale`) of the continuous part.
    ///
    /// Shapes one apart are linked by `P(a + 1, z) = P(a, z) - q(a)` with
    /// `q(a) = z^a e^-z / Γ(a + 1)`, so only the first term of each chain
    /// needs an incomplete gamma evaluation.
    fn continuous_part(&self, z: f64) -> (f64, f64) {
        let ln_z = z.ln();
        let mut p = vec![0.0f64; self.terms.len()];
        let mut q = vec![0.0f64; self.terms.len()];
        let mut cdf = 0.0;
        let mut density = 0.0;
        for (i, term) in self.terms.iter().enumerate() {
            match term.previous {
                Some(j) => {
                    p[i] = (p[j] - q[j]).max(0.0);
                    q[i] = q[j] * z / term.shape;
                }
                None => {
                    p[i] = gamma_cdf(term.shape, z);
                    q[i] = (term.shape * ln_z - z - term.ln_gamma_shape_plus_one).exp();
                }
            }
            cdf += term.weight * p[i];
            // Gamma(a, 1) density is q(a) * a / z
            density += term.weight * q[i] * term.shape / z;
        }
        (cdf, density)
    }

    fn cdf(&self, scale: f64, x: f64) -> f64 {
        if x.is_infinite() {
            return 1.0;
        }
        if x <= 0.0 {
            return if x < 0.0 { 0.0 } else { self.zero_mass };
        }
        (self.zero_mass + self.continuous_part(x / scale).0).min(1.0)
    }

    fn pdf(&self, scale: f64, x: f64) -> f64 {
        if !(x > 0.0) || x.is_infinite() {
            return 0.0;
        }
        self.continuous_part(x / scale).1 / scale
    }
}
