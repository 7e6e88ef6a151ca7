//! `chr validate fast|full`: invariant checks with a CSV report.
//!
//! `fast` is deterministic: Laplace identities, the closed-form tables
//! against their printed formulas, the BHN solver, limits and sign checks.
//! `full` adds the Monte Carlo cross-checks at `n = 10^6`.

use std::io::Write;

use clap::ValueEnum;

use chr_core::analytic::{self, Estimand};
use chr_core::dependence::kendall_tau;
use chr_core::simulate::{self, ks_critical_1pct, ks_statistic, SimConfig};
use chr_core::{Arm, BaselineHazard, CopulaSpec, DistributionSpec, Family, Scenario};

use crate::figures::{bhn, cox_scenario};
use crate::tables::frailty;
use crate::{Context, GridSpec, Outcome, OutputFile};

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

/// Deliberate defects used to check that the suite can fail.
#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// Perturbs the implementation side of the table 1 check.
    Table1,
}

/// Seed of the `full` checks when `--seed` is not given.
pub const DEFAULT_SEED: u64 = 20_250_101;
const DEFAULT_N: usize = 1_000_000;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    /// Passes when `measured <= tolerance`.
    fn within(name: &'static str, measured: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed: measured <= tolerance,
            measured,
            tolerance,
            detail: detail.into(),
        }
    }

    fn failed(name: &'static str, error: impl std::fmt::Display) -> Self {
        Self {
            name,
            passed: false,
            measured: f64::NAN,
            tolerance: f64::NAN,
            detail: format!("error: {error}"),
        }
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

type CheckFn = fn(&Suite) -> anyhow::Result<Check>;

struct Suite {
    grid: Vec<f64>,
    baseline: BaselineHazard,
    mutate: Option<Mutation>,
    config: SimConfig,
}

pub fn run(level: Level, mutate: Option<Mutation>, ctx: &Context) -> anyhow::Result<Outcome> {
    let seed = ctx.seed.unwrap_or(DEFAULT_SEED);
    let suite = Suite {
        grid: ctx.grid_or(GridSpec::DEFAULT)?,
        baseline: BaselineHazard::default(),
        mutate,
        config: SimConfig::new(ctx.n.unwrap_or(DEFAULT_N), seed).with_workers(ctx.workers),
    };
    let mut checks: Vec<(&'static str, CheckFn)> = vec![
        ("laplace_identities", laplace_identities),
        ("table1_formulas", table1_formulas),
        ("table2_formulas", table2_formulas),
        ("table3_formulas", table3_formulas),
        ("bhn_solver", bhn_solver),
        ("frailty_limits", frailty_limits),
        ("product_limits", product_limits),
        ("mchr_at_zero_is_chr", mchr_at_zero_is_chr),
        ("null_effect", null_effect),
        ("frailty_direction", frailty_direction),
        ("crossing_above_one", crossing_above_one),
        ("crossing_below_one", crossing_below_one),
        ("survival_curves", survival_curves),
    ];
    if level == Level::Full {
        checks.extend([
            ("oracle_triangle", oracle_triangle as CheckFn),
            ("copula_tau", copula_tau),
            ("copula_extremes", copula_extremes),
            ("copula_marginals", copula_marginals),
            ("survival_ks", survival_ks),
            ("cox_declines", cox_declines),
        ]);
    }
    let results: Vec<Check> = checks
        .into_iter()
        .map(|(name, f)| f(&suite).unwrap_or_else(|e| Check::failed(name, e)))
        .collect();
    for c in &results {
        println!(
            "{} {:<22} measured {:.3e} tolerance {:.3e} {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.measured,
            c.tolerance,
            c.detail
        );
    }
    let level_name = match level {
        Level::Fast => "fast",
        Level::Full => "full",
    };
    let file = OutputFile::csv(format!("validate_{level_name}.csv"), |w| {
        writeln!(w, "check,status,measured,tolerance,detail")?;
        for c in &results {
            writeln!(
                w,
                "{},{},{:.16e},{:.16e},{}",
                c.name,
                if c.passed { "pass" } else { "fail" },
                c.measured,
                c.tolerance,
                c.detail.replace(',', ";")
            )?;
        }
        Ok(())
    })?;
    let mut outcome = Outcome::new(format!("validate-{level_name}"), vec![file]);
    outcome.failed = results.iter().any(|c| !c.passed);
    if level == Level::Full {
        outcome.sim = Some(suite.config);
    }
    Ok(outcome)
}

fn laplace_identities(_: &Suite) -> anyhow::Result<Check> {
    let specs = [
        DistributionSpec::gamma(2.0, 0.5)?,
        DistributionSpec::inverse_gaussian(1.0, 2.0)?,
        DistributionSpec::compound_poisson(3.0, 0.5, 0.4)?,
        DistributionSpec::bhn(0.05, 0.5, 0.8, 3.5)?,
        DistributionSpec::degenerate(2.0)?,
    ];
    let mut worst: f64 = 0.0;
    for spec in &specs {
        worst = worst.max(rel(spec.laplace(0.0)?, 1.0));
        worst = worst.max(rel(-spec.laplace_d1(0.0)?, spec.mean()));
        worst = worst.max(rel(spec.laplace_d2(0.0)?, spec.variance() + spec.mean().powi(2)));
        for c in [0.1, 1.0, 5.0] {
            let h = 1e-5 * c;
            let (l, d1, d2) = (spec.laplace(c)?, spec.laplace_d1(c)?, spec.laplace_d2(c)?);
            if !(l > 0.0 && d1 < 0.0 && d2 > 0.0) {
                return Ok(Check::within("laplace_identities", f64::INFINITY, 1e-6, format!("sign pattern broken for {spec} at {c}")));
            }
            let fd1 = (spec.laplace(c + h)? - spec.laplace(c - h)?) / (2.0 * h);
            let fd2 = (spec.laplace_d1(c + h)? - spec.laplace_d1(c - h)?) / (2.0 * h);
            worst = worst.max(rel(fd1, d1)).max(rel(fd2, d2));
            worst = worst.max(rel(spec.survivor_mean(c)?, -d1 / l));
        }
    }
    Ok(Check::within("laplace_identities", worst, 1e-6, "L(0) = 1; moments at 0; finite differences; -L'/L"))
}

fn table1_formulas(s: &Suite) -> anyhow::Result<Check> {
    let mut worst: f64 = 0.0;
    for theta in [0.5, 1.0, 2.0] {
        for c in [3.0, 1.0 / 3.0] {
            for (name, printed) in [
                ("gamma", (|t3: f64, c: f64, th: f64| 1.0 + 60.0 * (c - 1.0) / (60.0 + c * t3 * th)) as fn(f64, f64, f64) -> f64),
                ("invgauss", |t3, c, th| c * (30.0 + t3 * th).sqrt() / (30.0 + c * t3 * th).sqrt()),
                ("cpoisson", |t3, c, th| c * ((90.0 + t3 * th) / (90.0 + c * t3 * th)).powf(1.5)),
            ] {
                let f = frailty(name, theta)?;
                for &t in &s.grid {
                    let mut got = analytic::mchr_frailty_only(&f, c, &s.baseline, t)?;
                    if s.mutate == Some(Mutation::Table1) {
                        got *= 1.0 + 1e-9;
                    }
                    worst = worst.max(rel(got, printed(t.powi(3), c, theta)));
                }
            }
        }
    }
    Ok(Check::within("table1_formulas", worst, 1e-12, "18 cells on the grid"))
}

fn table2_formulas(s: &Suite) -> anyhow::Result<Check> {
    let mut worst: f64 = 0.0;
    for c in [3.0, 1.0 / 3.0] {
        for th in [0.5, 1.0, 2.0] {
            let (p1, mu1) = crate::tables::default_benefit(c);
            let specs = [
                DistributionSpec::from_mean_var(Family::Gamma, c, th)?,
                DistributionSpec::from_mean_var(Family::InverseGaussian, c, th)?,
                DistributionSpec::from_mean_var(Family::CompoundPoisson, c, th)?,
                DistributionSpec::bhn_from_moments(p1, mu1, c, th)?,
            ];
            for (i, spec) in specs.iter().enumerate() {
                for &t in &s.grid {
                    let t3 = t.powi(3);
                    let printed = match (i, spec) {
                        (0, _) => 60.0 * c * c / (th * t3 + 60.0 * c),
                        (1, _) => c * (30.0 * c).sqrt() / (t3 * th + 30.0 * c).sqrt(),
                        (2, _) => c * (th * t3 / (90.0 * c) + 1.0).powf(-1.5),
                        (_, DistributionSpec::Bhn { p_benefit: p1, benefit: m1, p_harm: p2, harm: m2 }) => {
                            let e2 = (-t3 * (m2 - m1) / 60.0).exp();
                            let e3 = (-t3 * (1.0 - m1) / 60.0).exp();
                            let p3 = 1.0 - p1 - p2;
                            (p1 * m1 + p2 * m2 * e2 + p3 * e3) / (p1 + p2 * e2 + p3 * e3)
                        }
                        _ => unreachable!(),
                    };
                    worst = worst.max(rel(analytic::mchr_modifier_only(spec, &s.baseline, t)?, printed));
                }
            }
        }
    }
    Ok(Check::within("table2_formulas", worst, 1e-11, "4 families x 2 means x 3 variances"))
}

fn table3_formulas(s: &Suite) -> anyhow::Result<Check> {
    let mut worst: f64 = 0.0;
    for mean in [3.0, 1.0 / 3.0] {
        let m = bhn(mean)?;
        let atoms = m.atoms().expect("BHN is discrete");
        for th in [0.5, 1.0, 2.0] {
            for name in ["gamma", "invgauss", "cpoisson"] {
                let f = frailty(name, th)?;
                for &t in &s.grid {
                    let x = t.powi(3) / 60.0;
                    let (mut num, mut den) = (0.0, 0.0);
                    for &(mu, p) in &atoms {
                        let (a, b) = match name {
                            "gamma" => ((1.0 + th * x * mu).powf(-(1.0 + 1.0 / th)), (1.0 + th * x * mu).powf(-1.0 / th)),
                            "invgauss" => {
                                // exact m0; the asymptotic (2θ0 x μ)^(-1/2) is only its large-t form
                                let w = ((1.0 - (1.0 + 2.0 * th * x * mu).sqrt()) / th).exp();
                                ((1.0 + 2.0 * th * x * mu).powf(-0.5) * w, w)
                            }
                            _ => {
                                let r = 3.0 / (3.0 + 2.0 * th * mu * x);
                                let w = (3.0 / th * r.sqrt() - 1.0).exp();
                                (r.powf(1.5) * w, w)
                            }
                        };
                        num += p * mu * a;
                        den += p * b;
                    }
                    worst = worst.max(rel(analytic::cond_exp_product(&f, &m, &s.baseline, t)?, num / den));
                }
            }
        }
    }
    Ok(Check::within("table3_formulas", worst, 1e-9, "3 frailties x 3 variances x 2 BHN means"))
}

fn bhn_solver(_: &Suite) -> anyhow::Result<Check> {
    let mut worst: f64 = 0.0;
    for (p1, mu1, mean, p2, mu2) in [(0.05, 0.5, 3.0, 0.82, 3.5), (0.9, 0.1, 1.0 / 3.0, 0.03, 6.0)] {
        let DistributionSpec::Bhn { p_harm, harm, .. } = DistributionSpec::bhn_from_moments(p1, mu1, mean, 1.0)? else {
            unreachable!()
        };
        // errors in units of the printed rounding
        worst = worst.max((p_harm - p2).abs() / 0.005).max((harm - mu2).abs() / 0.05);
    }
    Ok(Check::within("bhn_solver", worst, 1.0, "|error| / printed rounding"))
}

fn frailty_limits(s: &Suite) -> anyhow::Result<Check> {
    let mut worst: f64 = 0.0;
    for c in [3.0f64, 1.0 / 3.0] {
        for th in [0.5, 1.0, 2.0] {
            for (name, limit) in [("gamma", 1.0), ("invgauss", c.sqrt()), ("cpoisson", c.powf(-0.5))] {
                worst = worst.max(rel(analytic::mchr_frailty_only(&frailty(name, th)?, c, &s.baseline, 50.0)?, limit));
            }
        }
    }
    Ok(Check::within("frailty_limits", worst, 0.05, "MCHR at t = 50"))
}

fn product_limits(s: &Suite) -> anyhow::Result<Check> {
    let mut worst: f64 = 0.0;
    let t = 50.0;
    let t3 = t * t * t;
    for mean in [3.0, 1.0 / 3.0] {
        let m = bhn(mean)?;
        let atoms = m.atoms().expect("BHN is discrete");
        let mu1 = atoms[0].0;
        for th in [0.5, 1.0, 2.0] {
            let e = |name: &str| -> anyhow::Result<f64> { Ok(analytic::cond_exp_product(&frailty(name, th)?, &m, &s.baseline, t)?) };
            worst = worst.max(rel(e("gamma")? * th * t3 / 60.0, 1.0));
            worst = worst.max(rel(e("invgauss")? / (30.0 / (t3 * th)).sqrt(), mu1.sqrt()));
            let cpoi_sum: f64 = atoms.iter().map(|&(mu, p)| p / mu.sqrt()).sum();
            worst = worst.max(rel(e("cpoisson")? / (90f64.powf(1.5) * (th * t3).powf(-1.5)), cpoi_sum));
        }
    }
    Ok(Check::within("product_limits", worst, 0.05, "scaled product at t = 50"))
}

fn scenarios() -> anyhow::Result<Vec<Scenario>> {
    let g = DistributionSpec::gamma(2.0, 0.5)?;
    let ig = DistributionSpec::inverse_gaussian(1.0, 1.0)?;
    Ok(vec![
        Scenario::frailty_only(g, 3.0)?,
        Scenario::frailty_only(DistributionSpec::compound_poisson(3.0, 0.5, 2.0 / 3.0)?, 1.0 / 3.0)?,
        Scenario::modifier_only(bhn(3.0)?)?,
        Scenario::joint(ig, bhn(1.0 / 3.0)?, CopulaSpec::independent())?,
        Scenario::joint(g, DistributionSpec::gamma(9.0, 1.0 / 3.0)?, CopulaSpec::independent())?,
    ])
}

fn mchr_at_zero_is_chr(_: &Suite) -> anyhow::Result<Check> {
    let mut worst: f64 = 0.0;
    for s in scenarios()? {
        worst = worst.max(rel(analytic::mchr(&s, 0.0)?, analytic::chr(&s)?));
    }
    Ok(Check::within("mchr_at_zero_is_chr", worst, 1e-9, "five independent scenarios"))
}

fn null_effect(s: &Suite) -> anyhow::Result<Check> {
    let mut worst: f64 = 0.0;
    for name in ["gamma", "invgauss", "cpoisson"] {
        let sc = Scenario::frailty_only(frailty(name, 1.0)?, 1.0)?;
        for &t in &s.grid {
            worst = worst.max((analytic::mchr(&sc, t)? - 1.0).abs());
        }
    }
    Ok(Check::within("null_effect", worst, 1e-14, "c = 1 gives MCHR = 1"))
}

fn frailty_direction(s: &Suite) -> anyhow::Result<Check> {
    // frailty selection pulls the MCHR from c towards and past the null, never beyond c
    let mut worst: f64 = 0.0;
    for name in ["gamma", "invgauss", "cpoisson"] {
        for th in [0.5, 1.0, 2.0] {
            for c in [3.0, 1.0 / 3.0] {
                let sc = Scenario::frailty_only(frailty(name, th)?, c)?;
                for &t in &s.grid {
                    let m = analytic::mchr(&sc, t)?;
                    let excess = if c > 1.0 { m - c } else { c - m };
                    worst = worst.max(excess / c);
                }
            }
        }
    }
    Ok(Check::within("frailty_direction", worst, 1e-12, "MCHR stays on the null side of c"))
}

fn crossing_above_one(s: &Suite) -> anyhow::Result<Check> {
    let sc = Scenario::frailty_only(frailty("cpoisson", 1.0)?, 1.0 / 3.0)?;
    let top = analytic::curve(&sc, Estimand::Mchr, &s.grid)?.values.into_iter().fold(f64::MIN, f64::max);
    Ok(Check::within("crossing_above_one", 1.0 - top, -f64::MIN_POSITIVE, format!("CHR 1/3 with max MCHR {top:.6}")))
}

fn crossing_below_one(s: &Suite) -> anyhow::Result<Check> {
    let sc = Scenario::modifier_only(bhn(3.0)?)?;
    let low = analytic::curve(&sc, Estimand::Mchr, &s.grid)?.values.into_iter().fold(f64::MAX, f64::min);
    Ok(Check::within("crossing_below_one", low - 1.0, -f64::MIN_POSITIVE, format!("CHR 3 with min MCHR {low:.6}")))
}

fn survival_curves(s: &Suite) -> anyhow::Result<Check> {
    let mut checked = 0;
    for sc in scenarios()? {
        for arm in Arm::BOTH {
            // CurveSample rejects values outside (0, 1] and increasing curves
            let c = analytic::curve(&sc, Estimand::Survival(arm), &s.grid)?;
            if c.times[0] == 0.0 && c.values[0] != 1.0 {
                anyhow::bail!("S(0) = {} for {arm}", c.values[0]);
            }
            checked += 1;
        }
    }
    Ok(Check::within("survival_curves", 0.0, 0.0, format!("{checked} curves in (0, 1] and nonincreasing")))
}

fn oracle_triangle(s: &Suite) -> anyhow::Result<Check> {
    let times = [0.5, 1.0, 2.0, 4.0, 8.0];
    let mut worst: f64 = 0.0;
    for name in ["gamma", "invgauss"] {
        let sc = Scenario::joint(frailty(name, 1.0)?, bhn(3.0)?, CopulaSpec::independent())?;
        let emp = simulate::empirical_mchr(&sc, &times, &s.config)?;
        for (i, &t) in times.iter().enumerate() {
            worst = worst.max((analytic::mchr(&sc, t)? - emp.curve.values[i]).abs() / emp.std_errors[i]);
        }
    }
    Ok(Check::within("oracle_triangle", worst, 3.0, format!("max |z| over t in {times:?}; n = {}", s.config.n)))
}

fn copula_pairs(tau: f64, n: usize, seed: u64) -> anyhow::Result<(Vec<f64>, Vec<f64>)> {
    let sc = Scenario::joint(
        frailty("invgauss", 1.0)?,
        DistributionSpec::from_mean_var(Family::Gamma, 3.0, 1.0)?,
        CopulaSpec::gaussian(tau)?,
    )?;
    let draws = simulate::draw_latents(&sc, &SimConfig::new(n, seed))?;
    Ok((draws.u0, draws.u1))
}

fn copula_tau(s: &Suite) -> anyhow::Result<Check> {
    let mut worst: f64 = 0.0;
    for tau in [-0.5, 0.5] {
        let (u0, u1) = copula_pairs(tau, 100_000, s.config.seed)?;
        worst = worst.max((kendall_tau(&u0, &u1) - tau).abs());
    }
    Ok(Check::within("copula_tau", worst, 0.02, "|tau_hat - tau| at n = 1e5"))
}

fn copula_extremes(s: &Suite) -> anyhow::Result<Check> {
    let mut worst: f64 = 0.0;
    for tau in [-1.0, 1.0] {
        let (u0, u1) = copula_pairs(tau, 10_000, s.config.seed)?;
        worst = worst.max((kendall_tau(&u0, &u1) - tau).abs());
    }
    Ok(Check::within("copula_extremes", worst, 0.0, "tau = +-1 gives monotone coupling"))
}

fn copula_marginals(s: &Suite) -> anyhow::Result<Check> {
    let n = 100_000;
    let mut worst: f64 = 0.0;
    for tau in [-0.5, 0.5, 1.0] {
        let (u0, u1) = copula_pairs(tau, n, s.config.seed)?;
        for (xs, mean, var) in [(&u0, 1.0, 1.0), (&u1, 3.0, 1.0)] {
            let m = xs.iter().sum::<f64>() / n as f64;
            worst = worst.max((m - mean).abs() / (var / n as f64).sqrt());
        }
    }
    Ok(Check::within("copula_marginals", worst, 4.0, "|z| of marginal means"))
}

fn survival_ks(s: &Suite) -> anyhow::Result<Check> {
    let mut worst: f64 = 0.0;
    for name in ["gamma", "invgauss", "cpoisson"] {
        let sc = Scenario::frailty_only(frailty(name, 1.0)?, 3.0)?;
        for arm in Arm::BOTH {
            let mut times = simulate::sample_event_times(&sc, arm, &s.config)?;
            let d = ks_statistic(&mut times, |t| 1.0 - analytic::survival_curve(&sc, arm, t).unwrap_or(f64::NAN));
            worst = worst.max(d / ks_critical_1pct(s.config.n));
        }
    }
    Ok(Check::within("survival_ks", worst, 1.0, "KS distance / 1% critical value"))
}

fn cox_declines(s: &Suite) -> anyhow::Result<Check> {
    let sweep = simulate::cox_estimand_sweep(&cox_scenario()?, &[2.0, 4.0, 6.0, 8.0], &s.config)?;
    let steepest_rise = sweep.windows(2).map(|w| w[1].value - w[0].value).fold(f64::MIN, f64::max);
    let values: Vec<String> = sweep.iter().map(|e| format!("{:.4}", e.value)).collect();
    Ok(Check::within("cox_declines", steepest_rise, -f64::MIN_POSITIVE, format!("follow-up 2/4/6/8: {}", values.join(" "))))
}
