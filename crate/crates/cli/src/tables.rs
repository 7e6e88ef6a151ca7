//! `chr table 1|2|3`: closed-form columns on the time grid, one wide CSV.

use std::io::Write;

use clap::Args;

use chr_core::analytic::{self, cond_exp_given_survival};
use chr_core::{BaselineHazard, CopulaSpec, DistributionSpec, Family, Scenario};

use crate::{param_label, parse_family_name, parse_ratio, Context, GridSpec, Outcome, OutputFile, UsageError};

#[derive(Args, Debug, Clone)]
pub struct TableArgs {
    /// 1: frailty only; 2: modifier only; 3: frailty with a BHN modifier.
    #[arg(value_parser = clap::value_parser!(u8).range(1..=3))]
    pub which: u8,

    /// Family names (frailty for tables 1 and 3, modifier for table 2).
    #[arg(long = "family", visible_alias = "frailty", value_delimiter = ',', value_parser = parse_family_name)]
    pub families: Vec<String>,

    /// Homogeneous effect c (table 1); fractions such as `1/3` are accepted.
    #[arg(long = "c", value_delimiter = ',', value_parser = parse_ratio)]
    pub effects: Vec<f64>,

    /// Frailty variance θ0 (tables 1 and 3).
    #[arg(long = "theta0", value_delimiter = ',', value_parser = parse_ratio)]
    pub theta0: Vec<f64>,

    /// Modifier mean (tables 2 and 3).
    #[arg(long = "mean", value_delimiter = ',', value_parser = parse_ratio)]
    pub means: Vec<f64>,

    /// Modifier variance (tables 2 and 3).
    #[arg(long = "var", value_delimiter = ',', value_parser = parse_ratio)]
    pub variances: Vec<f64>,

    /// BHN benefit probability; defaults to 0.05 for means above 1 and 0.9 otherwise.
    #[arg(long)]
    pub p1: Option<f64>,

    /// BHN benefit level; defaults to 0.5 for means above 1 and 0.1 otherwise.
    #[arg(long)]
    pub mu1: Option<f64>,
}

const FRAILTY_FAMILIES: [&str; 3] = ["gamma", "invgauss", "cpoisson"];
const MODIFIER_FAMILIES: [&str; 4] = ["gamma", "invgauss", "cpoisson", "bhn"];

/// Benefit probability and level used for a BHN modifier of the given mean
/// when none are supplied.
pub fn default_benefit(mean: f64) -> (f64, f64) {
    if mean > 1.0 {
        (0.05, 0.5)
    } else {
        (0.9, 0.1)
    }
}

/// Named columns sharing one time grid.
struct Wide {
    times: Vec<f64>,
    columns: Vec<(String, Vec<f64>)>,
}

impl Wide {
    fn push(&mut self, name: String, f: impl Fn(f64) -> chr_core::Result<f64>) -> anyhow::Result<()> {
        let values = self.times.iter().map(|&t| f(t)).collect::<chr_core::Result<Vec<f64>>>()?;
        self.columns.push((name, values));
        Ok(())
    }

    fn write(&self, w: &mut Vec<u8>) -> std::io::Result<()> {
        write!(w, "t")?;
        for (name, _) in &self.columns {
            write!(w, ",{name}")?;
        }
        writeln!(w)?;
        for (i, t) in self.times.iter().enumerate() {
            write!(w, "{t:.16e}")?;
            for (_, values) in &self.columns {
                write!(w, ",{:.16e}", values[i])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn pick<'a>(given: &'a [String], allowed: &[&'a str], table: u8) -> anyhow::Result<Vec<&'a str>> {
    if given.is_empty() {
        return Ok(allowed.to_vec());
    }
    given
        .iter()
        .map(|g| {
            allowed.iter().find(|a| *a == g).copied().ok_or_else(|| {
                UsageError(format!(
                    "family `{g}` is not available in table {table}; valid names: {}",
                    allowed.join(", ")
                ))
                .into()
            })
        })
        .collect()
}

fn or_default(given: &[f64], default: &[f64]) -> Vec<f64> {
    if given.is_empty() {
        default.to_vec()
    } else {
        given.to_vec()
    }
}

fn family(name: &str) -> Family {
    name.parse().expect("names are validated by the argument parser")
}

/// A unit-mean frailty with variance `theta0`.
pub fn frailty(name: &str, theta0: f64) -> chr_core::Result<DistributionSpec> {
    DistributionSpec::from_mean_var(family(name), 1.0, theta0)
}

fn modifier(name: &str, mean: f64, var: f64, args: &TableArgs) -> chr_core::Result<DistributionSpec> {
    match family(name) {
        Family::Bhn { .. } => {
            let (p1, mu1) = default_benefit(mean);
            DistributionSpec::bhn_from_moments(args.p1.unwrap_or(p1), args.mu1.unwrap_or(mu1), mean, var)
        }
        f => DistributionSpec::from_mean_var(f, mean, var),
    }
}

pub fn run(args: &TableArgs, ctx: &Context) -> anyhow::Result<Outcome> {
    if ctx.scenario.is_some() {
        return Err(UsageError("tables use built-in scenarios; drop --scenario".to_string()).into());
    }
    let baseline = BaselineHazard::default();
    let mut wide = Wide {
        times: ctx.grid_or(GridSpec::DEFAULT)?,
        columns: Vec::new(),
    };
    match args.which {
        1 => table1(args, &baseline, &mut wide)?,
        2 => table2(args, &baseline, &mut wide)?,
        _ => table3(args, &baseline, &mut wide)?,
    }
    let name = format!("table{}", args.which);
    let file = OutputFile::csv(format!("{name}.csv"), |w| wide.write(w))?;
    Ok(Outcome::new(name, vec![file]))
}

fn table1(args: &TableArgs, baseline: &BaselineHazard, wide: &mut Wide) -> anyhow::Result<()> {
    let families = pick(&args.families, &FRAILTY_FAMILIES, 1)?;
    let effects = or_default(&args.effects, &[3.0, 1.0 / 3.0]);
    let thetas = or_default(&args.theta0, &[0.5, 1.0, 2.0]);
    for name in families {
        for &theta0 in &thetas {
            let f = frailty(name, theta0)?;
            for &c in &effects {
                let key = format!("{name}:theta0={}:c={}", param_label(theta0), param_label(c));
                wide.push(format!("cond_exp_a1:{key}"), |t| {
                    cond_exp_given_survival(&f, c * baseline.cumulative(t))
                })?;
                wide.push(format!("cond_exp_a0:{key}"), |t| cond_exp_given_survival(&f, baseline.cumulative(t)))?;
                wide.push(format!("mchr:{key}"), |t| analytic::mchr_frailty_only(&f, c, baseline, t))?;
            }
        }
    }
    Ok(())
}

fn table2(args: &TableArgs, baseline: &BaselineHazard, wide: &mut Wide) -> anyhow::Result<()> {
    let families = pick(&args.families, &MODIFIER_FAMILIES, 2)?;
    let means = or_default(&args.means, &[3.0, 1.0 / 3.0]);
    let variances = or_default(&args.variances, &[0.5, 1.0, 2.0]);
    for name in families {
        for &mean in &means {
            for &var in &variances {
                let m = modifier(name, mean, var, args)?;
                let key = format!("{name}:mean={}:var={}", param_label(mean), param_label(var));
                wide.push(format!("cond_exp_modifier:{key}"), |t| {
                    analytic::mchr_modifier_only(&m, baseline, t)
                })?;
            }
        }
    }
    Ok(())
}

fn table3(args: &TableArgs, baseline: &BaselineHazard, wide: &mut Wide) -> anyhow::Result<()> {
    let families = pick(&args.families, &FRAILTY_FAMILIES, 3)?;
    let thetas = or_default(&args.theta0, &[0.5, 1.0, 2.0]);
    let means = or_default(&args.means, &[3.0, 1.0 / 3.0]);
    let variances = or_default(&args.variances, &[1.0]);
    for name in families {
        for &theta0 in &thetas {
            let f = frailty(name, theta0)?;
            for &mean in &means {
                for &var in &variances {
                    let m = modifier("bhn", mean, var, args)?;
                    let scenario = Scenario::joint(f, m, CopulaSpec::independent())?;
                    let key = format!(
                        "{name}:theta0={}:bhn_mean={}:bhn_var={}",
                        param_label(theta0),
                        param_label(mean),
                        param_label(var)
                    );
                    wide.push(format!("cond_exp_product:{key}"), |t| {
                        analytic::cond_exp_product(&f, &m, baseline, t)
                    })?;
                    wide.push(format!("asymptote:{key}"), |t| {
                        Ok(analytic::product_asymptote(&f, &m, baseline, t).unwrap_or(f64::NAN))
                    })?;
                    wide.push(format!("cond_exp_frailty_a0:{key}"), |t| {
                        cond_exp_given_survival(&f, baseline.cumulative(t))
                    })?;
                    wide.push(format!("mchr:{key}"), |t| analytic::mchr(&scenario, t))?;
                    let limit = analytic::mchr_limit(&scenario).unwrap_or(f64::NAN);
                    wide.push(format!("mchr_limit:{key}"), |_| Ok(limit))?;
                }
            }
        }
    }
    Ok(())
}
