//! Gaussian-copula coupling of the frailty and the modifier.
//!
//! Kendall's τ fixes the copula correlation through `ρ = sin(πτ/2)`. At
//! `τ = ±1` the pair is coupled exactly (co- or countermonotone) rather than
//! through a degenerate bivariate normal.

use std::f64::consts::FRAC_PI_2;

use rand::distr::Open01;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::{DistributionSpec, QuantileFunction};
use crate::error::{Error, Result};
use crate::numeric::{integrate, normal_cdf, normal_quantile, Pchip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CopulaFamily {
    #[default]
    Independent,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CopulaSpec {
    pub family: CopulaFamily,
    pub kendall_tau: f64,
}

impl CopulaSpec {
    pub fn independent() -> Self {
        Self {
            family: CopulaFamily::Independent,
            kendall_tau: 0.0,
        }
    }

    pub fn gaussian(kendall_tau: f64) -> Result<Self> {
        let spec = Self {
            family: CopulaFamily::Gaussian,
            kendall_tau,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kendall_tau.is_finite() && self.kendall_tau.abs() <= 1.0) {
            return Err(Error::InvalidParameter {
                name: "kendall_tau",
                value: self.kendall_tau,
                reason: "must lie in [-1, 1]",
            });
        }
        if self.family == CopulaFamily::Independent && self.kendall_tau != 0.0 {
            return Err(Error::InvalidParameter {
                name: "kendall_tau",
                value: self.kendall_tau,
                reason: "the independence copula has tau = 0",
            });
        }
        Ok(())
    }

    pub fn is_independent(&self) -> bool {
        self.family == CopulaFamily::Independent || self.kendall_tau == 0.0
    }

    /// Normal-scale correlation `sin(πτ/2)`, exactly ±1 at the endpoints.
    pub fn correlation(&self) -> f64 {
        match self.family {
            CopulaFamily::Independent => 0.0,
            CopulaFamily::Gaussian if self.kendall_tau == 1.0 => 1.0,
            CopulaFamily::Gaussian if self.kendall_tau == -1.0 => -1.0,
            CopulaFamily::Gaussian => (FRAC_PI_2 * self.kendall_tau).sin(),
        }
    }
}

/// Keeps a probability strictly inside `(0, 1)` so quantiles stay finite.
fn open_unit(u: f64) -> f64 {
    u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn quantile_of(q: &QuantileFunction, u: f64) -> f64 {
    q.eval(open_unit(u)).expect("probability clamped into (0, 1)")
}

/// Draws `(U0, U1)` with the given marginals and copula.
///
/// Independent pairs use the direct samplers. Otherwise `(Z0, Z1)` is a
/// standard bivariate normal with correlation `ρ` and each coordinate goes
/// through `quantile(Φ(Z))`; at `|ρ| = 1` a single uniform `u` gives
/// `(Q0(u), Q1(u))` or `(Q0(u), Q1(1 - u))`.
pub fn sample_pair<R: Rng + ?Sized>(
    copula: &CopulaSpec,
    marg0: &DistributionSpec,
    marg1: &DistributionSpec,
    rng: &mut R,
) -> (f64, f64) {
    PairSampler::new(copula, marg0, marg1).sample(rng)
}

/// [`sample_pair`] with the quantile setup hoisted out of the draw loop.
pub struct PairSampler {
    copula: CopulaSpec,
    marg0: DistributionSpec,
    marg1: DistributionSpec,
    q0: QuantileFunction,
    q1: QuantileFunction,
}

impl PairSampler {
    pub fn new(copula: &CopulaSpec, marg0: &DistributionSpec, marg1: &DistributionSpec) -> Self {
        Self {
            copula: *copula,
            marg0: *marg0,
            marg1: *marg1,
            q0: QuantileFunction::new(marg0),
            q1: QuantileFunction::new(marg1),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        if self.copula.is_independent() {
            let u0 = self.marg0.sample(rng);
            return (u0, self.marg1.sample(rng));
        }
        let rho = self.copula.correlation();
        if rho == 1.0 || rho == -1.0 {
            let u: f64 = rng.sample(Open01);
            let v = if rho > 0.0 { u } else { 1.0 - u };
            return (quantile_of(&self.q0, u), quantile_of(&self.q1, v));
        }
        let z0: f64 = rng.sample(StandardNormal);
        let w: f64 = rng.sample(StandardNormal);
        let z1 = rho * z0 + (1.0 - rho * rho).sqrt() * w;
        (quantile_of(&self.q0, normal_cdf(z0)), quantile_of(&self.q1, normal_cdf(z1)))
    }
}

/// Kendall's τ-b in `O(n log n)` (Knight's merge-sort algorithm).
pub fn kendall_tau(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "kendall_tau needs paired samples");
    let n = x.len();
    if n < 2 {
        return f64::NAN;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]).then(y[i].total_cmp(&y[j])));

    let mut x_ties = 0u64;
    let mut joint_ties = 0u64;
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && x[order[end]] == x[order[start]] {
            end += 1;
        }
        x_ties += pairs(end - start);
        let mut k = start;
        while k < end {
            let mut l = k + 1;
            while l < end && y[order[l]] == y[order[k]] {
                l += 1;
            }
            joint_ties += pairs(l - k);
            k = l;
        }
        start = end;
    }

    let mut ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    let swaps = count_inversions(&mut ys);

    let mut y_ties = 0u64;
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && ys[end] == ys[start] {
            end += 1;
        }
        y_ties += pairs(end - start);
        start = end;
    }

    let total = pairs(n);
    let numerator = total as f64 - x_ties as f64 - y_ties as f64 + joint_ties as f64 - 2.0 * swaps as f64;
    let denominator = ((total - x_ties) as f64 * (total - y_ties) as f64).sqrt();
    numerator / denominator
}

fn pairs(m: usize) -> u64 {
    let m = m as u64;
    m * m.saturating_sub(1) / 2
}

// Bottom-up merge sort returning the number of strictly inverted pairs.
fn count_inversions(values: &mut [f64]) -> u64 {
    let n = values.len();
    let mut buffer = values.to_vec();
    let mut swaps = 0u64;
    let mut width = 1;
    while width < n {
        let mut lo = 0;
        while lo < n {
            let mid = (lo + width).min(n);
            let hi = (lo + 2 * width).min(n);
            let (mut i, mut j, mut k) = (lo, mid, lo);
            while i < mid && j < hi {
                if values[j] < values[i] {
                    buffer[k] = values[j];
                    swaps += (mid - i) as u64;
                    j += 1;
                } else {
                    buffer[k] = values[i];
                    i += 1;
                }
                k += 1;
            }
            buffer[k..k + (mid - i)].copy_from_slice(&values[i..mid]);
            k += mid - i;
            buffer[k..k + (hi - j)].copy_from_slice(&values[j..hi]);
            lo = hi;
        }
        values.copy_from_slice(&buffer);
        width *= 2;
    }
    swaps
}

// Normal-scale range outside which the copula integrals are truncated.
const Z_MAX: f64 = 9.0;
// Spacing of the tabulated normal-scale quantile functions.
const Z_STEP: f64 = 0.005;
const PRODUCT_TOL: f64 = 1e-8;

/// `g(z) = Q(Φ(z))` for one marginal: exact steps for discrete laws, a
/// monotone cubic table otherwise.
enum NormalScaleQuantile {
    Steps { levels: Vec<f64>, thresholds: Vec<f64> },
    Table { table: Pchip, breaks: Vec<f64> },
}

impl NormalScaleQuantile {
    fn new(spec: &DistributionSpec) -> Result<Self> {
        if let Some(atoms) = spec.atoms() {
            let levels = atoms.iter().map(|a| a.0).collect();
            let thresholds = spec.probability_breaks().into_iter().map(normal_quantile).collect();
            return Ok(Self::Steps { levels, thresholds });
        }
        let breaks: Vec<f64> = spec
            .probability_breaks()
            .into_iter()
            .map(normal_quantile)
            .filter(|z| z.abs() < Z_MAX)
            .collect();
        let steps = (2.0 * Z_MAX / Z_STEP).round() as usize;
        let mut zs: Vec<f64> = (0..=steps).map(|i| -Z_MAX + i as f64 * Z_STEP).collect();
        zs.extend(breaks.iter().copied());
        zs.sort_by(f64::total_cmp);
        zs.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        let q = QuantileFunction::new(spec);
        let values = zs.iter().map(|&z| quantile_of(&q, normal_cdf(z))).collect();
        Ok(Self::Table {
            table: Pchip::new(zs, values)?,
            breaks,
        })
    }

    fn eval(&self, z: f64) -> f64 {
        match self {
            Self::Steps { levels, thresholds } => {
                let k = thresholds.partition_point(|&t| t < z);
                levels[k]
            }
            Self::Table { table, .. } => table.eval(z),
        }
    }

    fn breaks(&self) -> &[f64] {
        match self {
            Self::Steps { thresholds, .. } => thresholds,
            Self::Table { breaks, .. } => breaks,
        }
    }

    /// `E[g(mean + scale W)]` for standard normal `W`.
    fn smoothed(&self, mean: f64, scale: f64) -> Result<f64> {
        match self {
            Self::Steps { levels, thresholds } => {
                let mut lower = 0.0;
                let mut total = 0.0;
                for (k, &level) in levels.iter().enumerate() {
                    let upper = match thresholds.get(k) {
                        Some(&t) => normal_cdf((t - mean) / scale),
                        None => 1.0,
                    };
                    total += level * (upper - lower);
                    lower = upper;
                }
                Ok(total)
            }
            Self::Table { table, breaks } => {
                let w_breaks: Vec<f64> = breaks.iter().map(|&b| (b - mean) / scale).collect();
                integrate(
                    |w| table.eval(mean + scale * w) * (-0.5 * w * w).exp(),
                    -Z_MAX,
                    Z_MAX,
                    &w_breaks,
                    PRODUCT_TOL,
                )
                .map(|v| v / (2.0 * std::f64::consts::PI).sqrt())
            }
        }
    }
}

/// `E[U0 U1]` under the copula.
///
/// Independent pairs give the product of means. Otherwise the expectation is
/// computed on the normal scale as `E[g0(Z0) g1(Z1)]` with nested adaptive
/// quadrature (a single integral when `|ρ| = 1`); accuracy is about `1e-6`
/// relative, limited by the quantile tables of continuous marginals.
pub fn product_moment(copula: &CopulaSpec, marg0: &DistributionSpec, marg1: &DistributionSpec) -> Result<f64> {
    let point_mass = |m: &DistributionSpec| m.atoms().is_some_and(|a| a.len() == 1);
    if copula.is_independent() || point_mass(marg0) || point_mass(marg1) {
        return Ok(marg0.mean() * marg1.mean());
    }
    let rho = copula.correlation();
    let g0 = NormalScaleQuantile::new(marg0)?;
    let g1 = NormalScaleQuantile::new(marg1)?;
    let density = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();

    let mut breaks: Vec<f64> = g0.breaks().to_vec();
    if rho == 1.0 || rho == -1.0 {
        breaks.extend(g1.breaks().iter().map(|&b| b * rho));
        return integrate(|x| g0.eval(x) * g1.eval(rho * x) * density(x), -Z_MAX, Z_MAX, &breaks, PRODUCT_TOL);
    }
    let scale = (1.0 - rho * rho).sqrt();
    let failure = std::cell::RefCell::new(None);
    let value = integrate(
        |x| {
            let g = g0.eval(x);
            if g == 0.0 {
                return 0.0;
            }
            match g1.smoothed(rho * x, scale) {
                Ok(inner) => g * inner * density(x),
                Err(e) => {
                    failure.borrow_mut().get_or_insert(e);
                    f64::NAN
                }
            }
        },
        -Z_MAX,
        Z_MAX,
        &breaks,
        PRODUCT_TOL,
    );
    match failure.into_inner() {
        Some(e) => Err(e),
        None => value,
    }
}
