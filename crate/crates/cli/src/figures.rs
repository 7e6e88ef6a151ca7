//! `chr figure <id>`: one CSV per plotted line, named by legend keys.
//!
//! Overlays drawn for comparison (transparent reference curves, limits) go
//! to a `reference/` subdirectory so the top level holds exactly the
//! legend's lines.

use clap::{Args, ValueEnum};

use chr_core::analytic::{self, CurveSample, Estimand};
use chr_core::simulate::{self, SimConfig};
use chr_core::{Arm, CopulaSpec, DistributionSpec, Family, Scenario};

use crate::tables::{default_benefit, frailty};
use crate::{file_label, Context, GridSpec, Outcome, OutputFile, UsageError};

#[derive(Args, Debug, Clone)]
pub struct FigureArgs {
    pub id: FigureId,

    /// Exponential censoring rates of the dashed curves of the Cox figure.
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.3, 1.0])]
    pub censor_rates: Vec<f64>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum FigureId {
    /// MCHR under frailty alone.
    Frailty,
    /// MCHR under effect modification alone.
    Het,
    /// Frailty with a BHN modifier.
    Joint,
    /// As `joint` on a longer horizon, with limits.
    JointLong,
    /// `E[U0 U1 | T^1 >= t]` with Gaussian-copula dependence.
    CopulaExpect,
    /// MCHR with Gaussian-copula dependence and a BHN modifier.
    CopulaMchr,
    /// MCHR with Gaussian-copula dependence and a gamma modifier.
    CopulaGamma,
    /// Cox estimand against follow-up.
    Cox,
    /// Survival curves of both arms.
    Survival,
}

impl FigureId {
    pub fn name(self) -> &'static str {
        match self {
            FigureId::Frailty => "frailty",
            FigureId::Het => "het",
            FigureId::Joint => "joint",
            FigureId::JointLong => "joint-long",
            FigureId::CopulaExpect => "copula-expect",
            FigureId::CopulaMchr => "copula-mchr",
            FigureId::CopulaGamma => "copula-gamma",
            FigureId::Cox => "cox",
            FigureId::Survival => "survival",
        }
    }

    fn needs_simulation(self) -> bool {
        matches!(
            self,
            FigureId::CopulaExpect | FigureId::CopulaMchr | FigureId::CopulaGamma | FigureId::Cox | FigureId::Survival
        )
    }
}

const FRAILTIES: [&str; 3] = ["gamma", "invgauss", "cpoisson"];
const MODIFIERS: [&str; 4] = ["bhn", "gamma", "invgauss", "cpoisson"];
const VARIANCES: [f64; 3] = [0.5, 1.0, 2.0];
const EFFECTS: [f64; 2] = [3.0, 1.0 / 3.0];
const TAUS: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];
const LONG_GRID: GridSpec = GridSpec {
    t0: 0.0,
    t1: 50.0,
    steps: 201,
};

/// Unit-variance BHN modifier with the given mean.
pub fn bhn(mean: f64) -> chr_core::Result<DistributionSpec> {
    let (p1, mu1) = default_benefit(mean);
    DistributionSpec::bhn_from_moments(p1, mu1, mean, 1.0)
}

fn modifier(name: &str, mean: f64, var: f64) -> chr_core::Result<DistributionSpec> {
    match name.parse::<Family>()? {
        Family::Bhn { .. } => {
            let (p1, mu1) = default_benefit(mean);
            DistributionSpec::bhn_from_moments(p1, mu1, mean, var)
        }
        f => DistributionSpec::from_mean_var(f, mean, var),
    }
}

/// Gamma(1, 1) frailty with the unit-variance, mean-3 BHN modifier.
pub fn cox_scenario() -> chr_core::Result<Scenario> {
    Scenario::joint(DistributionSpec::gamma(1.0, 1.0)?, bhn(3.0)?, CopulaSpec::independent())
}

struct Builder {
    figure: &'static str,
    grid: Vec<f64>,
    sim: Option<SimConfig>,
    files: Vec<OutputFile>,
}

impl Builder {
    fn add(&mut self, key: &str, sample: &CurveSample) -> anyhow::Result<()> {
        let path = format!("{}/{key}.csv", self.figure);
        self.files.push(OutputFile::csv(path, |w| sample.write_csv(w))?);
        Ok(())
    }

    /// Closed form when the latents are independent, weighted Monte Carlo
    /// otherwise.
    fn curve(&self, scenario: &Scenario, estimand: Estimand) -> anyhow::Result<CurveSample> {
        if scenario.is_independent() {
            return Ok(analytic::curve(scenario, estimand, &self.grid)?);
        }
        let config = self.sim.expect("simulated figures resolve their config first");
        Ok(simulate::empirical_curve(scenario, estimand, &self.grid, &config)?.curve)
    }

    fn line(&mut self, key: &str, scenario: &Scenario, estimand: Estimand) -> anyhow::Result<()> {
        let sample = self.curve(scenario, estimand)?;
        self.add(key, &sample)
    }

    fn limit(&mut self, key: &str, scenario: &Scenario) -> anyhow::Result<()> {
        let Some(limit) = analytic::mchr_limit(scenario) else {
            return Ok(());
        };
        let sample = CurveSample::new(
            Estimand::Mchr,
            self.grid.clone(),
            vec![limit; self.grid.len()],
            analytic::scenario_fingerprint(scenario),
        )?;
        self.add(key, &sample)
    }
}

pub fn run(args: &FigureArgs, ctx: &Context) -> anyhow::Result<Outcome> {
    if ctx.scenario.is_some() {
        return Err(UsageError("figures use built-in scenarios; drop --scenario".to_string()).into());
    }
    let default_grid = if args.id == FigureId::JointLong {
        LONG_GRID
    } else {
        GridSpec::DEFAULT
    };
    let sim = if args.id.needs_simulation() {
        Some(ctx.sim_config()?)
    } else {
        None
    };
    let mut b = Builder {
        figure: args.id.name(),
        grid: ctx.grid_or(default_grid)?,
        sim,
        files: Vec::new(),
    };
    match args.id {
        FigureId::Frailty => frailty_lines(&mut b)?,
        FigureId::Het => het_lines(&mut b)?,
        FigureId::Joint => joint_lines(&mut b, false)?,
        FigureId::JointLong => joint_lines(&mut b, true)?,
        FigureId::CopulaExpect => copula_lines(&mut b, "bhn", Estimand::CondExpProduct)?,
        FigureId::CopulaMchr => copula_lines(&mut b, "bhn", Estimand::Mchr)?,
        FigureId::CopulaGamma => copula_lines(&mut b, "gamma", Estimand::Mchr)?,
        FigureId::Cox => cox_lines(&mut b, &args.censor_rates)?,
        FigureId::Survival => survival_panels(&mut b)?,
    }
    let mut outcome = Outcome::new(format!("figure-{}", args.id.name()), b.files);
    outcome.sim = b.sim;
    Ok(outcome)
}

fn frailty_lines(b: &mut Builder) -> anyhow::Result<()> {
    for fam in FRAILTIES {
        for var in VARIANCES {
            for c in EFFECTS {
                let s = Scenario::frailty_only(frailty(fam, var)?, c)?;
                b.line(&format!("{fam}_var={}_c={}", file_label(var), file_label(c)), &s, Estimand::Mchr)?;
            }
        }
    }
    Ok(())
}

fn het_lines(b: &mut Builder) -> anyhow::Result<()> {
    for fam in MODIFIERS {
        for mean in EFFECTS {
            for var in VARIANCES {
                let s = Scenario::modifier_only(modifier(fam, mean, var)?)?;
                b.line(&format!("{fam}_mean={}_var={}", file_label(mean), file_label(var)), &s, Estimand::Mchr)?;
            }
        }
    }
    Ok(())
}

fn joint_lines(b: &mut Builder, with_limits: bool) -> anyhow::Result<()> {
    for fam in FRAILTIES {
        for var in VARIANCES {
            let f = frailty(fam, var)?;
            for mean in EFFECTS {
                let joint = Scenario::joint(f, bhn(mean)?, CopulaSpec::independent())?;
                let plain = Scenario::frailty_only(f, mean)?;
                let key = format!("{fam}_var={}_bhn_mean={}", file_label(var), file_label(mean));
                let ref_key = format!("reference/{fam}_var={}_c={}", file_label(var), file_label(mean));
                b.line(&key, &joint, Estimand::Mchr)?;
                b.line(&ref_key, &plain, Estimand::Mchr)?;
                if with_limits {
                    b.limit(&format!("reference/limit_{key}"), &joint)?;
                    b.limit(&format!("reference/limit_{fam}_var={}_c={}", file_label(var), file_label(mean)), &plain)?;
                }
            }
        }
    }
    Ok(())
}

fn copula_lines(b: &mut Builder, modifier_family: &str, estimand: Estimand) -> anyhow::Result<()> {
    for fam in FRAILTIES {
        let f = frailty(fam, 1.0)?;
        for mean in EFFECTS {
            let m = modifier(modifier_family, mean, 1.0)?;
            for tau in TAUS {
                let s = Scenario::joint(f, m, CopulaSpec::gaussian(tau)?)?;
                b.line(&format!("{fam}_mean={}_tau={tau}", file_label(mean)), &s, estimand)?;
            }
        }
        if estimand == Estimand::CondExpProduct {
            let s = Scenario::frailty_only(f, 1.0)?;
            b.line(&format!("{fam}_a0"), &s, Estimand::CondExpFrailty(Arm::Unexposed))?;
        }
    }
    Ok(())
}

/// Cox estimand at every positive grid point, read off one cohort.
pub fn cox_sweep(scenario: &Scenario, grid: &[f64], config: &SimConfig) -> anyhow::Result<CurveSample> {
    let followups: Vec<f64> = grid.iter().copied().filter(|&t| t > 0.0).collect();
    if followups.is_empty() {
        return Err(UsageError("the Cox estimand needs a grid with positive follow-up times".to_string()).into());
    }
    let values = simulate::cox_estimand_sweep(scenario, &followups, config)?
        .iter()
        .map(|e| e.value)
        .collect();
    Ok(CurveSample::new(
        Estimand::CoxEstimand,
        followups,
        values,
        simulate::sim_fingerprint(scenario, config),
    )?)
}

fn cox_lines(b: &mut Builder, censor_rates: &[f64]) -> anyhow::Result<()> {
    let s = cox_scenario()?;
    let base = b.sim.expect("cox figure is simulated");
    let solid = cox_sweep(&s, &b.grid, &base)?;
    b.add("cox_estimand", &solid)?;
    for &rate in censor_rates {
        let config = base.with_censor_rate(rate);
        config.validate()?;
        let dashed = cox_sweep(&s, &b.grid, &config)?;
        b.add(&format!("cox_estimand_censor_rate={rate}"), &dashed)?;
    }
    b.line("mchr", &s, Estimand::Mchr)
}

fn survival_panels(b: &mut Builder) -> anyhow::Result<()> {
    let t0 = Estimand::Survival(Arm::Unexposed);
    let t1 = Estimand::Survival(Arm::Exposed);
    for fam in FRAILTIES {
        let f = frailty(fam, 1.0)?;
        b.line(&format!("frailty/{fam}_a0"), &Scenario::frailty_only(f, 1.0)?, t0)?;
        for c in EFFECTS {
            b.line(&format!("frailty/{fam}_c={}", file_label(c)), &Scenario::frailty_only(f, c)?, t1)?;
        }
    }
    for fam in MODIFIERS {
        let unit = Scenario::modifier_only(DistributionSpec::degenerate(1.0)?)?;
        b.line(&format!("het/{fam}_a0"), &unit, t0)?;
        for mean in EFFECTS {
            let s = Scenario::modifier_only(modifier(fam, mean, 1.0)?)?;
            b.line(&format!("het/{fam}_mean={}", file_label(mean)), &s, t1)?;
        }
    }
    for fam in FRAILTIES {
        let f = frailty(fam, 1.0)?;
        b.line(&format!("joint/{fam}_a0"), &Scenario::frailty_only(f, 1.0)?, t0)?;
        for mean in EFFECTS {
            let s = Scenario::joint(f, bhn(mean)?, CopulaSpec::independent())?;
            b.line(&format!("joint/{fam}_bhn_mean={}", file_label(mean)), &s, t1)?;
        }
    }
    for (panel, modifier_family) in [("copula-bhn", "bhn"), ("copula-gamma", "gamma")] {
        for fam in FRAILTIES {
            let f = frailty(fam, 1.0)?;
            b.line(&format!("{panel}/{fam}_a0"), &Scenario::frailty_only(f, 1.0)?, t0)?;
            for mean in EFFECTS {
                let m = modifier(modifier_family, mean, 1.0)?;
                for tau in TAUS {
                    let s = Scenario::joint(f, m, CopulaSpec::gaussian(tau)?)?;
                    b.line(&format!("{panel}/{fam}_mean={}_tau={tau}", file_label(mean)), &s, t1)?;
                }
            }
        }
    }
    Ok(())
}
