//! The `chr` command line.
//!
//! Every command renders its CSV files in memory, writes them under `--out`
//! and drops a `<name>.manifest.toml` next to them. A manifest records the
//! arguments, the resolved scenario text and the SHA-256 of each output, so
//! `chr replay` can re-run it and check the bytes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context as _};
use clap::{Parser, Subcommand};

use chr_core::analytic::{self, Estimand};
use chr_core::distributions::FAMILY_NAMES;
use chr_core::simulate::{self, SimConfig};
use chr_core::Scenario;

pub mod figures;
pub mod manifest;
pub mod tables;
pub mod validate;

use manifest::RunManifest;

#[derive(Parser, Debug, Clone)]
#[command(name = "chr", version, about = "Causal and marginal hazard ratios under frailty and effect modification")]
pub struct Cli {
    /// Scenario config file (flat key/value TOML).
    #[arg(long, global = true)]
    pub scenario: Option<PathBuf>,

    /// Root seed of every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Number of simulated subjects; scientific notation such as `1e6` is accepted.
    #[arg(long, global = true, value_parser = parse_count)]
    pub n: Option<usize>,

    /// Time grid as `t0:t1:steps`.
    #[arg(long, global = true, value_parser = parse_grid)]
    pub grid: Option<GridSpec>,

    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker threads; outputs do not depend on it.
    #[arg(long, global = true, value_parser = parse_workers)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Closed-form table columns evaluated on the time grid.
    Table(tables::TableArgs),
    /// One CSV per plotted line of a figure.
    Figure(figures::FigureArgs),
    /// One estimand of the `--scenario` on the time grid.
    Curve {
        /// mchr, chr, cond_exp_frailty_a0, cond_exp_frailty_a1, cond_exp_modifier,
        /// cond_exp_product, survival_a0, survival_a1 or cox_estimand.
        #[arg(long, default_value = "mchr")]
        estimand: String,
        /// Exponential censoring rate (cox_estimand only).
        #[arg(long, default_value_t = 0.0)]
        censor_rate: f64,
    },
    /// Simulated cohort of the `--scenario`, one row per subject.
    Simulate {
        #[arg(long)]
        followup: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        censor_rate: f64,
    },
    /// Cox estimand and Cox fit of one simulated cohort.
    Cox {
        #[arg(long)]
        followup: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        censor_rate: f64,
    },
    /// Run the invariant suite and write a pass/fail report.
    Validate {
        level: validate::Level,
        #[arg(long, hide = true)]
        mutate: Option<validate::Mutation>,
    },
    /// Re-run a manifest and compare output digests.
    Replay { manifest: PathBuf },
}

/// `t0:t1:steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
}

impl GridSpec {
    pub const DEFAULT: GridSpec = GridSpec {
        t0: 0.0,
        t1: 12.0,
        steps: 61,
    };

    pub fn points(&self) -> anyhow::Result<Vec<f64>> {
        Ok(analytic::linear_grid(self.t0, self.t1, self.steps)?)
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.t0, self.t1, self.steps)
    }
}

fn parse_grid(s: &str) -> Result<GridSpec, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [t0, t1, steps] = parts[..] else {
        return Err("expected t0:t1:steps".to_string());
    };
    let grid = GridSpec {
        t0: t0.parse().map_err(|e| format!("t0: {e}"))?,
        t1: t1.parse().map_err(|e| format!("t1: {e}"))?,
        steps: steps.parse().map_err(|e| format!("steps: {e}"))?,
    };
    grid.points().map_err(|e| e.to_string())?;
    Ok(grid)
}

fn parse_count(s: &str) -> Result<usize, String> {
    if let Ok(n) = s.parse::<usize>() {
        return if n > 0 { Ok(n) } else { Err("must be positive".to_string()) };
    }
    let x: f64 = s.parse().map_err(|_| format!("`{s}` is not a count"))?;
    if x >= 1.0 && x.fract() == 0.0 && x <= 9.007_199_254_740_992e15 {
        Ok(x as usize)
    } else {
        Err(format!("`{s}` is not a positive whole number"))
    }
}

fn parse_workers(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) | Err(_) => Err("expected a positive integer".to_string()),
        Ok(k) => Ok(k),
    }
}

/// A positive number, written as a decimal or a fraction such as `1/3`.
pub(crate) fn parse_ratio(s: &str) -> Result<f64, String> {
    let value = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
            let b: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
            a / b
        }
        None => s.parse().map_err(|e| format!("{e}"))?,
    };
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(format!("`{s}` is not a positive number"))
    }
}

pub(crate) fn parse_family_name(s: &str) -> Result<String, String> {
    let lower = s.to_ascii_lowercase();
    match chr_core::Family::from_str(&lower) {
        Ok(f) => Ok(f.name().to_string()),
        Err(_) => Err(format!("unknown family `{s}`; valid names: {}", FAMILY_NAMES.join(", "))),
    }
}

/// Compact parameter label: `3`, `0.5`, `1/3`.
pub(crate) fn param_label(x: f64) -> String {
    if x.fract() == 0.0 {
        return format!("{x}");
    }
    let inv = 1.0 / x;
    if inv > 1.5 && (inv - inv.round()).abs() < 1e-9 {
        return format!("1/{}", inv.round());
    }
    format!("{x}")
}

/// [`param_label`] made safe for file names.
pub(crate) fn file_label(x: f64) -> String {
    param_label(x).replace('/', "_")
}

/// A command line error that should be reported with usage exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Resolved global options shared by all commands.
#[derive(Debug, Clone)]
pub struct Context {
    pub scenario: Option<Scenario>,
    pub scenario_text: Option<String>,
    pub scenario_path: Option<String>,
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub grid: Option<GridSpec>,
    pub workers: usize,
}

impl Context {
    pub fn grid_or(&self, default: GridSpec) -> anyhow::Result<Vec<f64>> {
        self.grid.unwrap_or(default).points()
    }

    pub fn scenario(&self) -> anyhow::Result<&Scenario> {
        self.scenario
            .as_ref()
            .ok_or_else(|| UsageError("this command needs --scenario <path>".to_string()).into())
    }

    /// Simulation settings; randomized commands never pick a seed themselves.
    pub fn sim_config(&self) -> anyhow::Result<SimConfig> {
        let (Some(n), Some(seed)) = (self.n, self.seed) else {
            return Err(UsageError("this command simulates; pass both --n and --seed".to_string()).into());
        };
        let config = SimConfig::new(n, seed).with_workers(self.workers);
        config.validate()?;
        Ok(config)
    }
}

/// One rendered output file, with a path relative to the output directory.
#[derive(Debug, Clone)]
pub struct OutputFile {
    pub path: String,
    pub bytes: Vec<u8>,
}

impl OutputFile {
    pub fn csv(path: impl Into<String>, write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> anyhow::Result<Self> {
        let mut bytes = Vec::new();
        write(&mut bytes)?;
        Ok(Self {
            path: path.into(),
            bytes,
        })
    }
}

/// What a command produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    /// Manifest file stem, e.g. `figure-frailty`.
    pub name: String,
    pub files: Vec<OutputFile>,
    pub sim: Option<SimConfig>,
    pub failed: bool,
}

impl Outcome {
    fn new(name: impl Into<String>, files: Vec<OutputFile>) -> Self {
        Self {
            name: name.into(),
            files,
            sim: None,
            failed: false,
        }
    }
}

/// Parses `argv` (including the program name) and runs it. Returns the
/// process exit status.
pub fn run_from<I, T>(argv: I) -> anyhow::Result<i32>
where
    I: IntoIterator<Item = T>,
    T: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&argv)?;
    run(cli, &argv[1..])
}

/// Runs a parsed command line; `args` are the raw arguments after the
/// program name, recorded in the manifest.
pub fn run(cli: Cli, args: &[String]) -> anyhow::Result<i32> {
    let workers = cli.workers.unwrap_or_else(default_workers);
    if let Command::Replay { manifest } = &cli.command {
        return replay(manifest, cli.out.as_deref(), workers);
    }
    let (scenario, scenario_text) = match &cli.scenario {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let scenario = Scenario::from_config_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            (Some(scenario), Some(text))
        }
        None => (None, None),
    };
    let ctx = Context {
        scenario,
        scenario_text,
        scenario_path: cli.scenario.as_ref().map(|p| p.display().to_string()),
        seed: cli.seed,
        n: cli.n,
        grid: cli.grid,
        workers,
    };
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let outcome = execute(&cli.command, &ctx)?;
    let manifest = RunManifest::new(args, &ctx, &outcome);
    write_outcome(&out, &outcome, &manifest)?;
    for file in &outcome.files {
        eprintln!("wrote {}", out.join(&file.path).display());
    }
    Ok(if outcome.failed { 1 } else { 0 })
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Runs one command inside a pool of `ctx.workers` threads.
pub fn execute(command: &Command, ctx: &Context) -> anyhow::Result<Outcome> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(ctx.workers).build()?;
    pool.install(|| match command {
        Command::Table(args) => tables::run(args, ctx),
        Command::Figure(args) => figures::run(args, ctx),
        Command::Curve { estimand, censor_rate } => cmd_curve(estimand, *censor_rate, ctx),
        Command::Simulate { followup, censor_rate } => cmd_simulate(*followup, *censor_rate, ctx),
        Command::Cox { followup, censor_rate } => cmd_cox(*followup, *censor_rate, ctx),
        Command::Validate { level, mutate } => validate::run(*level, *mutate, ctx),
        Command::Replay { .. } => bail!("replay cannot be nested"),
    })
}

fn cmd_curve(estimand: &str, censor_rate: f64, ctx: &Context) -> anyhow::Result<Outcome> {
    let estimand = Estimand::from_str(estimand).map_err(|e| UsageError(e.to_string()))?;
    let scenario = ctx.scenario()?;
    let grid = ctx.grid_or(GridSpec::DEFAULT)?;
    let mut sim = None;
    let sample = if estimand == Estimand::CoxEstimand {
        let config = ctx.sim_config()?.with_censor_rate(censor_rate);
        config.validate()?;
        sim = Some(config);
        figures::cox_sweep(scenario, &grid, &config)?
    } else if scenario.is_independent() {
        analytic::curve(scenario, estimand, &grid)?
    } else {
        let config = ctx.sim_config()?;
        sim = Some(config);
        simulate::empirical_curve(scenario, estimand, &grid, &config)?.curve
    };
    let file = OutputFile::csv(format!("curve_{}.csv", estimand.label()), |w| sample.write_csv(w))?;
    let mut outcome = Outcome::new(format!("curve-{}", estimand.label()), vec![file]);
    outcome.sim = sim;
    Ok(outcome)
}

fn sim_with(ctx: &Context, followup: Option<f64>, censor_rate: f64) -> anyhow::Result<SimConfig> {
    let config = ctx
        .sim_config()?
        .with_followup(followup.unwrap_or(f64::INFINITY))
        .with_censor_rate(censor_rate);
    config.validate()?;
    Ok(config)
}

fn cmd_simulate(followup: Option<f64>, censor_rate: f64, ctx: &Context) -> anyhow::Result<Outcome> {
    let scenario = ctx.scenario()?;
    let config = sim_with(ctx, followup, censor_rate)?;
    let cohort = simulate::simulate_cohort(scenario, &config)?;
    let file = OutputFile::csv("cohort.csv", |w| cohort.write_csv(w))?;
    let mut outcome = Outcome::new("cohort", vec![file]);
    outcome.sim = Some(config);
    Ok(outcome)
}

fn cmd_cox(followup: Option<f64>, censor_rate: f64, ctx: &Context) -> anyhow::Result<Outcome> {
    let scenario = ctx.scenario()?;
    let config = sim_with(ctx, followup, censor_rate)?;
    let cohort = simulate::simulate_cohort(scenario, &config)?;
    let estimate = simulate::cox_estimand_from_cohort(scenario, &cohort, &config)?;
    let fit = simulate::fit_cox_binary(&cohort)?;
    let file = OutputFile::csv("cox.csv", |w| {
        use std::io::Write;
        writeln!(
            w,
            "followup,censor_rate,n,seed,deaths,cox_estimand,cox_estimand_se,cox_hr,cox_log_hr,cox_log_hr_se,iterations"
        )?;
        writeln!(
            w,
            "{:.16e},{:.16e},{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            config.followup,
            config.censor_rate,
            config.n,
            config.seed,
            estimate.deaths,
            estimate.value,
            estimate.std_error,
            fit.log_hr.exp(),
            fit.log_hr,
            fit.std_error,
            fit.iterations
        )
    })?;
    let mut outcome = Outcome::new("cox", vec![file]);
    outcome.sim = Some(config);
    Ok(outcome)
}

/// Writes the outputs and their manifest under `out`.
pub fn write_outcome(out: &Path, outcome: &Outcome, manifest: &RunManifest) -> anyhow::Result<PathBuf> {
    for file in &outcome.files {
        let path = out.join(&file.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&path, &file.bytes).with_context(|| format!("writing {}", path.display()))?;
    }
    fs::create_dir_all(out)?;
    let path = out.join(format!("{}.manifest.toml", outcome.name));
    fs::write(&path, manifest.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Re-runs a manifest into `out` (a scratch directory when absent) and
/// compares every output digest. Returns 1 on any mismatch.
pub fn replay(path: &Path, out: Option<&Path>, workers: usize) -> anyhow::Result<i32> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let recorded = RunManifest::from_toml(&text)?;
    let mut argv = vec!["chr".to_string()];
    argv.extend(recorded.command.iter().cloned());
    let cli = Cli::try_parse_from(&argv).map_err(|e| anyhow!("manifest command does not parse: {e}"))?;
    if matches!(cli.command, Command::Replay { .. }) {
        bail!("a manifest cannot record a replay");
    }
    let scenario = match &recorded.scenario {
        Some(text) => Some(Scenario::from_config_str(text).context("embedded scenario")?),
        None => None,
    };
    let ctx = Context {
        scenario,
        scenario_text: recorded.scenario.clone(),
        scenario_path: recorded.scenario_path.clone(),
        seed: cli.seed,
        n: cli.n,
        grid: cli.grid,
        workers,
    };
    let outcome = execute(&cli.command, &ctx)?;
    let fresh = RunManifest::new(&recorded.command, &ctx, &outcome);

    let scratch;
    let out = match out {
        Some(dir) => dir.to_path_buf(),
        None => {
            scratch = tempfile::tempdir()?;
            scratch.path().to_path_buf()
        }
    };
    write_outcome(&out, &outcome, &fresh)?;

    let mismatches = manifest::compare(&recorded, &fresh);
    for line in &mismatches {
        println!("MISMATCH {line}");
    }
    if mismatches.is_empty() {
        println!("replay ok: {} outputs identical", fresh.outputs.len());
        Ok(0)
    } else {
        Ok(1)
    }
}
