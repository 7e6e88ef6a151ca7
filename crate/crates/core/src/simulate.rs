//! Monte Carlo engines.
//!
//! Randomness is counter based: every purpose (latent pairs, event times,
//! cohorts) has its own ChaCha8 key derived from the root seed, and subject
//! `i` always reads stream `i` of that key. Work is split into fixed-size
//! chunks whose partial sums are combined by an order-fixed pairwise tree,
//! so results do not depend on the number of worker threads.

use std::io::{self, Write};

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{self, digest, linear_grid, CurveSample, Estimand};
use crate::dependence::PairSampler;
use crate::error::{check_nonneg, Error, Result};
use crate::numeric::{pairwise_sum, Pchip};
use crate::survival::{event_time_from_uniform, Arm, Scenario};

const CHUNK: usize = 4096;

const LATENT_DOMAIN: u64 = 0x6c61_7465_6e74_0001;
const EVENT_DOMAIN: u64 = 0x6576_656e_7400_0002;
const COHORT_DOMAIN: u64 = 0x636f_686f_7274_0003;

/// Effective sample size below which a weighted estimate is flagged.
pub const MIN_ESS: f64 = 100.0;

/// Grid resolution of interpolated log-MCHR curves used by the Cox estimand.
const COX_CURVE_POINTS: usize = 201;

const COX_MAX_ITER: usize = 50;
const COX_SCORE_TOL: f64 = 1e-8;

/// Replication count, seed, censoring and thread count of a simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub seed: u64,
    /// Administrative end of follow-up; `inf` for none.
    pub followup: f64,
    /// Rate of the exponential censoring time; 0 for none.
    pub censor_rate: f64,
    pub workers: usize,
}

impl SimConfig {
    /// `n` replications with no censoring, unlimited follow-up, one worker.
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            followup: f64::INFINITY,
            censor_rate: 0.0,
            workers: 1,
        }
    }

    pub fn with_followup(self, followup: f64) -> Self {
        Self { followup, ..self }
    }

    pub fn with_censor_rate(self, censor_rate: f64) -> Self {
        Self { censor_rate, ..self }
    }

    pub fn with_workers(self, workers: usize) -> Self {
        Self { workers, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParameter {
                name: "n",
                value: 0.0,
                reason: "need at least one replication",
            });
        }
        if !(self.followup > 0.0) {
            return Err(Error::InvalidParameter {
                name: "followup",
                value: self.followup,
                reason: "must be > 0 (or inf)",
            });
        }
        check_nonneg("censor_rate", self.censor_rate)?;
        if self.workers == 0 {
            return Err(Error::InvalidParameter {
                name: "workers",
                value: 0.0,
                reason: "need at least one worker",
            });
        }
        Ok(())
    }

    /// Everything that determines the output; the worker count does not.
    pub fn describe(&self) -> String {
        format!(
            "n = {}\nseed = {}\nfollowup = {:?}\ncensor_rate = {:?}\n",
            self.n, self.seed, self.followup, self.censor_rate
        )
    }
}

/// Fingerprint of a simulated estimand: scenario plus simulation settings.
pub fn sim_fingerprint(scenario: &Scenario, config: &SimConfig) -> String {
    digest(&format!("{}{}", scenario.to_config_string(), config.describe()))
}

fn stream_root(seed: u64, domain: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ domain)
}

fn subject_rng(root: &ChaCha8Rng, subject: usize) -> ChaCha8Rng {
    let mut rng = root.clone();
    rng.set_stream(subject as u64);
    rng
}

fn in_pool<T: Send>(workers: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(job))
}

/// Per-chunk sums of `K` terms, combined in a fixed pairwise order.
fn chunked_sums<const K: usize>(n: usize, term: impl Fn(usize) -> [f64; K] + Sync) -> [f64; K] {
    let partials: Vec<[f64; K]> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut acc = [0.0; K];
            for i in chunk * CHUNK..((chunk + 1) * CHUNK).min(n) {
                let v = term(i);
                for k in 0..K {
                    acc[k] += v[k];
                }
            }
            acc
        })
        .collect();
    let mut out = [0.0; K];
    for (k, slot) in out.iter_mut().enumerate() {
        let column: Vec<f64> = partials.iter().map(|p| p[k]).collect();
        *slot = pairwise_sum(&column);
    }
    out
}

/// Latent draws `(u0_i, u1_i)` shared by all weighted estimates of a run.
#[derive(Debug, Clone)]
pub struct LatentDraws {
    pub u0: Vec<f64>,
    pub u1: Vec<f64>,
    min_u0: f64,
    min_product: f64,
}

impl LatentDraws {
    pub fn len(&self) -> usize {
        self.u0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u0.is_empty()
    }
}

fn draw_pairs(scenario: &Scenario, n: usize, seed: u64) -> LatentDraws {
    let sampler = PairSampler::new(&scenario.dependence, &scenario.frailty, &scenario.modifier);
    let root = stream_root(seed, LATENT_DOMAIN);
    let mut pairs = vec![(0.0f64, 0.0f64); n];
    pairs.par_chunks_mut(CHUNK).enumerate().for_each(|(chunk, slots)| {
        for (j, slot) in slots.iter_mut().enumerate() {
            *slot = sampler.sample(&mut subject_rng(&root, chunk * CHUNK + j));
        }
    });
    let (u0, u1): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let min_u0 = u0.iter().copied().fold(f64::INFINITY, f64::min);
    let min_product = u0.iter().zip(&u1).map(|(a, b)| a * b).fold(f64::INFINITY, f64::min);
    LatentDraws {
        u0,
        u1,
        min_u0,
        min_product,
    }
}

/// Draws `config.n` latent pairs from the scenario's joint law.
pub fn draw_latents(scenario: &Scenario, config: &SimConfig) -> Result<LatentDraws> {
    scenario.validate()?;
    config.validate()?;
    in_pool(config.workers, || draw_pairs(scenario, config.n, config.seed))
}

/// Self-normalized importance-sampling estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedEstimate {
    pub estimate: f64,
    /// Delta-method (influence function) standard error.
    pub std_error: f64,
    /// Kish effective sample size `(Σw)² / Σw²` of the arm(s) involved.
    pub ess: f64,
    pub low_ess: bool,
}

/// Weighted estimate of an estimand at time `t` from fixed latent draws.
///
/// A subject surviving to `t` in arm `a` carries weight
/// `exp(-load_a Λ0(t))`, its survival probability given the latents.
/// Weights are rescaled by the smallest load so they cannot all underflow.
pub fn estimate_at(latents: &LatentDraws, scenario: &Scenario, estimand: Estimand, t: f64) -> Result<WeightedEstimate> {
    check_nonneg("t", t)?;
    let n = latents.len();
    if n == 0 {
        return Err(Error::InvalidParameter {
            name: "n",
            value: 0.0,
            reason: "need at least one replication",
        });
    }
    let x = scenario.baseline.cumulative(t);
    let c = scenario.effect_c;
    let (u0, u1) = (&latents.u0, &latents.u1);
    let w0 = |i: usize| (-(u0[i] - latents.min_u0) * x).exp();
    let w1 = |i: usize| (-c * (u0[i] * u1[i] - latents.min_product) * x).exp();
    // shifting by the first subject's values keeps constant integrands exact
    let (ref_f, ref_m, ref_p) = (u0[0], u1[0], u0[0] * u1[0]);

    if let Estimand::Survival(arm) = estimand {
        let (scale, w): (f64, &(dyn Fn(usize) -> f64 + Sync)) = match arm {
            Arm::Unexposed => ((-latents.min_u0 * x).exp(), &w0),
            Arm::Exposed => ((-c * latents.min_product * x).exp(), &w1),
        };
        let [s] = chunked_sums(n, |i| [w(i)]);
        let mean = s / n as f64;
        let [ss] = chunked_sums(n, |i| [(w(i) - mean).powi(2)]);
        return Ok(WeightedEstimate {
            estimate: scale * mean,
            std_error: scale * ss.sqrt() / n as f64,
            ess: n as f64,
            low_ess: (n as f64) < MIN_ESS,
        });
    }

    let sums = chunked_sums(n, |i| {
        let (a, b) = (w0(i), w1(i));
        let p = u0[i] * u1[i];
        [a, a * (u0[i] - ref_f), b, b * (p - ref_p), b * (u0[i] - ref_f), b * (u1[i] - ref_m), a * a, b * b]
    });
    let [s0, s_f0, s1, s_p, s_f1, s_m, s0_sq, s1_sq] = sums;
    if !(s0 > 0.0 && s1 > 0.0) {
        return Err(Error::WeightUnderflow { t });
    }
    let r0 = ref_f + s_f0 / s0;
    let rp = ref_p + s_p / s1;
    let rf1 = ref_f + s_f1 / s1;
    let rm = ref_m + s_m / s1;
    let ess0 = s0 * s0 / s0_sq;
    let ess1 = s1 * s1 / s1_sq;

    let (estimate, ess, influence): (f64, f64, Box<dyn Fn(usize) -> f64 + Sync>) = match estimand {
        Estimand::CondExpFrailty(Arm::Unexposed) => (r0, ess0, Box::new(move |i| w0(i) * (u0[i] - r0) / s0)),
        Estimand::CondExpFrailty(Arm::Exposed) => (rf1, ess1, Box::new(move |i| w1(i) * (u0[i] - rf1) / s1)),
        Estimand::CondExpModifier => (rm, ess1, Box::new(move |i| w1(i) * (u1[i] - rm) / s1)),
        Estimand::CondExpProduct => (rp, ess1, Box::new(move |i| w1(i) * (u0[i] * u1[i] - rp) / s1)),
        Estimand::Mchr | Estimand::Chr => {
            if estimand == Estimand::Chr && x != 0.0 {
                return estimate_at(latents, scenario, Estimand::Chr, 0.0);
            }
            let m = c * rp / r0;
            let f = move |i: usize| {
                m * (w1(i) * (u0[i] * u1[i] - rp) / (s1 * rp) - w0(i) * (u0[i] - r0) / (s0 * r0))
            };
            (m, ess0.min(ess1), Box::new(f))
        }
        Estimand::Survival(_) => unreachable!("handled above"),
        Estimand::CoxEstimand => {
            return Err(Error::Unsupported(
                "the Cox estimand is a functional of a cohort; use cox_estimand".to_string(),
            ))
        }
    };
    let [var] = chunked_sums(n, |i| [influence(i).powi(2)]);
    Ok(WeightedEstimate {
        estimate,
        std_error: var.sqrt(),
        ess,
        low_ess: ess < MIN_ESS,
    })
}

/// `E[U0 U1 | T^1 >= t]` by self-normalized importance sampling.
pub fn weighted_cond_exp_product(scenario: &Scenario, t: f64, config: &SimConfig) -> Result<WeightedEstimate> {
    let latents = draw_latents(scenario, config)?;
    in_pool(config.workers, || estimate_at(&latents, scenario, Estimand::CondExpProduct, t))?
}

/// Monte Carlo curve with pointwise standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCurve {
    pub curve: CurveSample,
    pub std_errors: Vec<f64>,
    pub ess: Vec<f64>,
}

impl EmpiricalCurve {
    /// True when some grid point has effective sample size below [`MIN_ESS`].
    pub fn low_ess(&self) -> bool {
        self.ess.iter().any(|&e| e < MIN_ESS)
    }
}

/// Estimates `estimand` along `grid`, reusing one set of latent draws.
pub fn empirical_curve(scenario: &Scenario, estimand: Estimand, grid: &[f64], config: &SimConfig) -> Result<EmpiricalCurve> {
    let latents = draw_latents(scenario, config)?;
    let points = in_pool(config.workers, || {
        grid.iter()
            .map(|&t| estimate_at(&latents, scenario, estimand, t))
            .collect::<Result<Vec<_>>>()
    })??;
    let curve = CurveSample::new(
        estimand,
        grid.to_vec(),
        points.iter().map(|p| p.estimate).collect(),
        sim_fingerprint(scenario, config),
    )?;
    Ok(EmpiricalCurve {
        curve,
        std_errors: points.iter().map(|p| p.std_error).collect(),
        ess: points.iter().map(|p| p.ess).collect(),
    })
}

/// Empirical MCHR: weighted `c E[U0 U1 | T^1 >= t]` over weighted
/// `E[U0 | T^0 >= t]`, from one set of draws.
pub fn empirical_mchr(scenario: &Scenario, grid: &[f64], config: &SimConfig) -> Result<EmpiricalCurve> {
    empirical_curve(scenario, Estimand::Mchr, grid, config)
}

/// Draws `T^a` for `config.n` subjects (latents and noise from one
/// per-subject stream).
pub fn sample_event_times(scenario: &Scenario, arm: Arm, config: &SimConfig) -> Result<Vec<f64>> {
    scenario.validate()?;
    config.validate()?;
    let sampler = PairSampler::new(&scenario.dependence, &scenario.frailty, &scenario.modifier);
    let root = stream_root(config.seed, EVENT_DOMAIN);
    in_pool(config.workers, || {
        let mut times = vec![0.0; config.n];
        times.par_chunks_mut(CHUNK).enumerate().for_each(|(chunk, slots)| {
            for (j, slot) in slots.iter_mut().enumerate() {
                let mut rng = subject_rng(&root, chunk * CHUNK + j);
                let (u0, u1) = sampler.sample(&mut rng);
                let n_t: f64 = rng.sample(Open01);
                *slot = event_time_from_uniform(u0, u1, arm, scenario.effect_c, &scenario.baseline, n_t);
            }
        });
        times
    })
}

/// Kolmogorov–Smirnov distance between a sample and a CDF. Infinite values
/// (subjects who never fail) count towards `n` but not towards the steps.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        if !x.is_finite() {
            break;
        }
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

/// Asymptotic Kolmogorov critical value `K_α / sqrt(n)` for α = 0.01.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFlag {
    Death,
    Censored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectRecord {
    pub arm: Arm,
    pub u0: f64,
    pub u1: f64,
    pub event_time: f64,
    pub observed_time: f64,
    pub event_flag: EventFlag,
}

/// A simulated two-arm randomized trial.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedCohort {
    pub records: Vec<SubjectRecord>,
}

impl SimulatedCohort {
    pub fn deaths(&self) -> impl Iterator<Item = &SubjectRecord> {
        self.records.iter().filter(|r| r.event_flag == EventFlag::Death)
    }

    /// Writes `a,u0,u1,event_time,observed_time,event_flag` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "a,u0,u1,event_time,observed_time,event_flag")?;
        for r in &self.records {
            let flag = match r.event_flag {
                EventFlag::Death => "death",
                EventFlag::Censored => "censored",
            };
            writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{flag}",
                r.arm, r.u0, r.u1, r.event_time, r.observed_time
            )?;
        }
        Ok(())
    }
}

/// Simulates `config.n` subjects with fair-coin exposure, independent
/// exponential censoring and administrative end of follow-up.
pub fn simulate_cohort(scenario: &Scenario, config: &SimConfig) -> Result<SimulatedCohort> {
    scenario.validate()?;
    config.validate()?;
    let sampler = PairSampler::new(&scenario.dependence, &scenario.frailty, &scenario.modifier);
    let root = stream_root(config.seed, COHORT_DOMAIN);
    let blank = SubjectRecord {
        arm: Arm::Unexposed,
        u0: 0.0,
        u1: 0.0,
        event_time: 0.0,
        observed_time: 0.0,
        event_flag: EventFlag::Censored,
    };
    let records = in_pool(config.workers, || {
        let mut records = vec![blank; config.n];
        records.par_chunks_mut(CHUNK).enumerate().for_each(|(chunk, slots)| {
            for (j, slot) in slots.iter_mut().enumerate() {
                let mut rng = subject_rng(&root, chunk * CHUNK + j);
                let arm = if rng.random_bool(0.5) { Arm::Exposed } else { Arm::Unexposed };
                let (u0, u1) = sampler.sample(&mut rng);
                let n_t: f64 = rng.sample(Open01);
                let event_time = event_time_from_uniform(u0, u1, arm, scenario.effect_c, &scenario.baseline, n_t);
                let censor_time = if config.censor_rate > 0.0 {
                    let e: f64 = rng.sample(Open01);
                    -e.ln() / config.censor_rate
                } else {
                    f64::INFINITY
                };
                let end = censor_time.min(config.followup);
                *slot = SubjectRecord {
                    arm,
                    u0,
                    u1,
                    event_time,
                    observed_time: event_time.min(end),
                    event_flag: if event_time <= end { EventFlag::Death } else { EventFlag::Censored },
                };
            }
        });
        records
    })?;
    Ok(SimulatedCohort { records })
}

/// `exp(E[log MCHR(T) | death observed])` with a delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoxEstimate {
    pub value: f64,
    pub std_error: f64,
    pub deaths: usize,
}

enum LogMchr {
    Direct(Scenario),
    Table(Pchip),
}

impl LogMchr {
    fn eval(&self, t: f64) -> Result<f64> {
        match self {
            LogMchr::Direct(s) => Ok(analytic::mchr(s, t)?.ln()),
            LogMchr::Table(p) => Ok(p.eval(t)),
        }
    }
}

/// Closed form when it is cheap; otherwise a monotone-cubic interpolant of
/// log MCHR on `[0, t_max]` (quadrature when independent, weighted Monte
/// Carlo from the run's seed when not).
fn log_mchr_source(scenario: &Scenario, t_max: f64, config: &SimConfig) -> Result<LogMchr> {
    let closed_form = scenario.modifier.is_discrete() || scenario.frailty.is_discrete();
    if scenario.is_independent() && closed_form {
        return Ok(LogMchr::Direct(*scenario));
    }
    let grid = linear_grid(0.0, t_max, COX_CURVE_POINTS)?;
    let values = if scenario.is_independent() {
        in_pool(config.workers, || analytic::curve(scenario, Estimand::Mchr, &grid))??.values
    } else {
        empirical_mchr(scenario, &grid, config)?.curve.values
    };
    Ok(LogMchr::Table(Pchip::new(grid, values.iter().map(|v| v.ln()).collect())?))
}

/// Cox estimand of a simulated cohort: log MCHR averaged over the observed
/// death times.
pub fn cox_estimand_from_cohort(scenario: &Scenario, cohort: &SimulatedCohort, config: &SimConfig) -> Result<CoxEstimate> {
    let times: Vec<f64> = cohort.deaths().map(|r| r.observed_time).collect();
    if times.is_empty() {
        return Err(Error::NoDeaths);
    }
    let t_max = times.iter().copied().fold(0.0, f64::max);
    let logs = log_mchr_at(scenario, &times, t_max, config)?;
    Ok(summarize_logs(&logs))
}

/// Simulates a cohort under `config` and returns its Cox estimand.
pub fn cox_estimand(scenario: &Scenario, config: &SimConfig) -> Result<CoxEstimate> {
    let cohort = simulate_cohort(scenario, config)?;
    cox_estimand_from_cohort(scenario, &cohort, config)
}

/// Cox estimand at each follow-up time, all read off one cohort simulated
/// without administrative censoring (`config.followup` is ignored). The
/// deaths observed by follow-up `f` are that cohort's deaths with
/// `event_time <= f`, which is what a separate run at `f` would record.
pub fn cox_estimand_sweep(scenario: &Scenario, followups: &[f64], config: &SimConfig) -> Result<Vec<CoxEstimate>> {
    if let Some(&f) = followups.iter().find(|f| !(f.is_finite() && **f > 0.0)) {
        return Err(Error::InvalidParameter {
            name: "followup",
            value: f,
            reason: "must be finite and positive",
        });
    }
    let Some(f_max) = followups.iter().copied().reduce(f64::max) else {
        return Ok(Vec::new());
    };
    let cohort = simulate_cohort(scenario, &config.with_followup(f64::INFINITY))?;
    let mut times: Vec<f64> = cohort.deaths().map(|r| r.event_time).filter(|&t| t <= f_max).collect();
    if times.is_empty() {
        return Err(Error::NoDeaths);
    }
    times.sort_by(f64::total_cmp);
    let logs = log_mchr_at(scenario, &times, times[times.len() - 1], config)?;
    followups
        .iter()
        .map(|&f| match times.partition_point(|&t| t <= f) {
            0 => Err(Error::NoDeaths),
            d => Ok(summarize_logs(&logs[..d])),
        })
        .collect()
}

fn log_mchr_at(scenario: &Scenario, times: &[f64], t_max: f64, config: &SimConfig) -> Result<Vec<f64>> {
    let source = log_mchr_source(scenario, t_max.max(f64::MIN_POSITIVE), config)?;
    in_pool(config.workers, || times.par_iter().map(|&t| source.eval(t)).collect::<Result<Vec<f64>>>())?
}

fn summarize_logs(logs: &[f64]) -> CoxEstimate {
    let d = logs.len();
    let shift = logs[0];
    let [s] = chunked_sums(d, |i| [logs[i] - shift]);
    let mean = shift + s / d as f64;
    let [ss] = chunked_sums(d, |i| [(logs[i] - mean).powi(2)]);
    let sd = (ss / (d.max(2) - 1) as f64).sqrt();
    let value = mean.exp();
    CoxEstimate {
        value,
        std_error: value * sd / (d as f64).sqrt(),
        deaths: d,
    }
}

/// Cox partial-likelihood fit with the exposure as the only covariate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoxFit {
    pub log_hr: f64,
    pub std_error: f64,
    pub iterations: usize,
}

/// Risk-set counts at one distinct death time.
struct RiskRow {
    at_risk0: f64,
    at_risk1: f64,
    deaths: f64,
    deaths1: f64,
}

fn risk_table(cohort: &SimulatedCohort) -> Vec<RiskRow> {
    let mut order: Vec<&SubjectRecord> = cohort.records.iter().collect();
    order.sort_by(|a, b| b.observed_time.total_cmp(&a.observed_time));
    let mut rows = Vec::new();
    let (mut n0, mut n1) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let t = order[i].observed_time;
        let (mut d, mut d1) = (0.0, 0.0);
        while i < order.len() && order[i].observed_time == t {
            let r = order[i];
            match r.arm {
                Arm::Unexposed => n0 += 1.0,
                Arm::Exposed => n1 += 1.0,
            }
            if r.event_flag == EventFlag::Death {
                d += 1.0;
                if r.arm == Arm::Exposed {
                    d1 += 1.0;
                }
            }
            i += 1;
        }
        if d > 0.0 {
            rows.push(RiskRow {
                at_risk0: n0,
                at_risk1: n1,
                deaths: d,
                deaths1: d1,
            });
        }
    }
    rows
}

/// Log partial likelihood, score and information at `beta` (Breslow ties).
fn partial_likelihood(rows: &[RiskRow], beta: f64) -> (f64, f64, f64) {
    let e = beta.exp();
    let mut terms: Vec<[f64; 3]> = Vec::with_capacity(rows.len());
    for r in rows {
        let denom = r.at_risk0 + r.at_risk1 * e;
        let p = r.at_risk1 * e / denom;
        terms.push([r.deaths1 * beta - r.deaths * denom.ln(), r.deaths1 - r.deaths * p, r.deaths * p * (1.0 - p)]);
    }
    let col = |k: usize| pairwise_sum(&terms.iter().map(|t| t[k]).collect::<Vec<f64>>());
    (col(0), col(1), col(2))
}

/// Newton–Raphson maximization of the Cox partial likelihood for a binary
/// exposure, with step halving. Converged once `|score| < 1e-8`, or once
/// the Newton step is at rounding level of `beta`.
pub fn fit_cox_binary(cohort: &SimulatedCohort) -> Result<CoxFit> {
    let mut deaths = [0usize; 2];
    for r in cohort.deaths() {
        deaths[r.arm.index() as usize] += 1;
    }
    if deaths[0] == 0 || deaths[1] == 0 {
        return Err(Error::EmptyArm {
            unexposed: deaths[0],
            exposed: deaths[1],
        });
    }
    let rows = risk_table(cohort);
    let mut beta = 0.0;
    let (mut loglik, mut score, mut info) = partial_likelihood(&rows, beta);
    for iteration in 1..=COX_MAX_ITER {
        if score.abs() < COX_SCORE_TOL {
            return Ok(CoxFit {
                log_hr: beta,
                std_error: 1.0 / info.sqrt(),
                iterations: iteration - 1,
            });
        }
        let step = score / info;
        let mut scale = 1.0;
        let mut next = partial_likelihood(&rows, beta + step);
        while next.0 < loglik && scale > 1e-10 {
            scale *= 0.5;
            next = partial_likelihood(&rows, beta + scale * step);
        }
        let moved = scale * step;
        beta += moved;
        (loglik, score, info) = next;
        if moved.abs() <= 4.0 * f64::EPSILON * beta.abs().max(1.0) {
            return Ok(CoxFit {
                log_hr: beta,
                std_error: 1.0 / info.sqrt(),
                iterations: iteration,
            });
        }
    }
    if score.abs() < COX_SCORE_TOL {
        return Ok(CoxFit {
            log_hr: beta,
            std_error: 1.0 / info.sqrt(),
            iterations: COX_MAX_ITER,
        });
    }
    Err(Error::CoxNonConvergence {
        iterations: COX_MAX_ITER,
        log_hr: beta,
        score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dependence::CopulaSpec;
    use crate::distributions::DistributionSpec;

    fn point(v: f64) -> DistributionSpec {
        DistributionSpec::degenerate(v).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::new(0, 1).validate().is_err());
        assert!(SimConfig::new(10, 1).with_workers(0).validate().is_err());
        assert!(SimConfig::new(10, 1).with_followup(0.0).validate().is_err());
        assert!(SimConfig::new(10, 1).with_censor_rate(-1.0).validate().is_err());
        assert!(SimConfig::new(10, 1).validate().is_ok());
        let a = SimConfig::new(10, 1).with_workers(4);
        assert_eq!(a.describe(), SimConfig::new(10, 1).describe());
    }

    #[test]
    fn subject_streams_do_not_depend_on_chunking() {
        let root = stream_root(7, LATENT_DOMAIN);
        let a: f64 = subject_rng(&root, 5000).sample(Open01);
        let mut other = stream_root(7, LATENT_DOMAIN);
        let _: f64 = other.sample(Open01);
        let b: f64 = subject_rng(&root, 5000).sample(Open01);
        assert_eq!(a, b);
        let c: f64 = subject_rng(&root, 5001).sample(Open01);
        assert_ne!(a, c);
    }

    #[test]
    fn point_masses_give_exact_product() {
        let s = Scenario::new(point(2.0), point(3.0), CopulaSpec::independent(), 1.0, Default::default()).unwrap();
        for t in [0.0, 1.0, 5.0] {
            let e = weighted_cond_exp_product(&s, t, &SimConfig::new(1000, 3)).unwrap();
            assert_eq!(e.estimate, 6.0);
            assert_eq!(e.std_error, 0.0);
        }
        let flat = Scenario::frailty_only(point(1.0), 3.0).unwrap();
        let grid = linear_grid(0.0, 6.0, 7).unwrap();
        let curve = empirical_mchr(&flat, &grid, &SimConfig::new(500, 1)).unwrap();
        assert!(curve.curve.values.iter().all(|&v| (v - 3.0).abs() < 1e-15));
    }

    #[test]
    fn weighted_product_matches_closed_form() {
        let frailty = DistributionSpec::gamma(1.0, 1.0).unwrap();
        let modifier = DistributionSpec::bhn_from_moments(0.05, 0.5, 3.0, 1.0).unwrap();
        let s = Scenario::joint(frailty, modifier, CopulaSpec::independent()).unwrap();
        let config = SimConfig::new(200_000, 11);
        let at0 = weighted_cond_exp_product(&s, 0.0, &config).unwrap();
        assert!((at0.estimate - 3.0).abs() < 3.0 * at0.std_error);
        let e = weighted_cond_exp_product(&s, 2.0, &config).unwrap();
        let exact = analytic::cond_exp_product(&frailty, &modifier, &s.baseline, 2.0).unwrap();
        assert!((e.estimate - exact).abs() < 3.0 * e.std_error, "{e:?} vs {exact}");
        assert!(!e.low_ess);
    }

    #[test]
    fn standard_error_coverage() {
        let frailty = DistributionSpec::gamma(1.0, 1.0).unwrap();
        let modifier = DistributionSpec::bhn_from_moments(0.05, 0.5, 3.0, 1.0).unwrap();
        let s = Scenario::joint(frailty, modifier, CopulaSpec::independent()).unwrap();
        let exact = analytic::cond_exp_product(&frailty, &modifier, &s.baseline, 2.0).unwrap();
        let runs = 200;
        let covered = (0..runs)
            .filter(|&r| {
                let e = weighted_cond_exp_product(&s, 2.0, &SimConfig::new(10_000, 1000 + r)).unwrap();
                (e.estimate - exact).abs() <= 1.96 * e.std_error
            })
            .count();
        let rate = covered as f64 / runs as f64;
        assert!((rate - 0.95).abs() <= 0.04, "coverage {rate}");
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let frailty = DistributionSpec::compound_poisson(3.0, 0.5, 2.0 / 3.0).unwrap();
        let modifier = DistributionSpec::gamma(9.0, 1.0 / 3.0).unwrap();
        let s = Scenario::joint(frailty, modifier, CopulaSpec::gaussian(0.5).unwrap()).unwrap();
        let grid = linear_grid(0.0, 10.0, 11).unwrap();
        let one = empirical_mchr(&s, &grid, &SimConfig::new(20_000, 5)).unwrap();
        let four = empirical_mchr(&s, &grid, &SimConfig::new(20_000, 5).with_workers(4)).unwrap();
        assert_eq!(one, four);
        let c1 = simulate_cohort(&s, &SimConfig::new(9000, 2).with_censor_rate(0.3)).unwrap();
        let c3 = simulate_cohort(&s, &SimConfig::new(9000, 2).with_censor_rate(0.3).with_workers(3)).unwrap();
        assert_eq!(c1, c3);
    }

    #[test]
    fn survival_estimate_matches_laplace() {
        let frailty = DistributionSpec::inverse_gaussian(1.0, 0.5).unwrap();
        let s = Scenario::frailty_only(frailty, 3.0).unwrap();
        let grid = [0.0, 1.0, 3.0, 6.0];
        for arm in Arm::BOTH {
            let mc = empirical_curve(&s, Estimand::Survival(arm), &grid, &SimConfig::new(100_000, 9)).unwrap();
            for (k, &t) in grid.iter().enumerate() {
                let exact = analytic::survival_curve(&s, arm, t).unwrap();
                assert!((mc.curve.values[k] - exact).abs() <= 3.0 * mc.std_errors[k] + 1e-15, "{arm} t={t}");
            }
        }
    }

    #[test]
    fn cohort_censoring() {
        let s = Scenario::frailty_only(DistributionSpec::gamma(1.0, 1.0).unwrap(), 3.0).unwrap();
        let plain = simulate_cohort(&s, &SimConfig::new(5000, 4)).unwrap();
        assert!(plain.records.iter().all(|r| r.event_flag == EventFlag::Death && r.observed_time == r.event_time));
        let heavy = simulate_cohort(&s, &SimConfig::new(5000, 4).with_censor_rate(50.0)).unwrap();
        let censored = heavy.records.iter().filter(|r| r.event_flag == EventFlag::Censored).count();
        assert!(censored as f64 > 0.9 * 5000.0);
        for r in &heavy.records {
            assert!(r.observed_time <= r.event_time);
            assert_eq!(r.event_flag == EventFlag::Death, r.observed_time == r.event_time);
        }
        let mut buf = Vec::new();
        plain.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("a,u0,u1,event_time,observed_time,event_flag\n"));
    }

    #[test]
    fn death_fraction_matches_survival_mixture() {
        let frailty = DistributionSpec::gamma(1.0, 1.0).unwrap();
        let modifier = DistributionSpec::bhn_from_moments(0.05, 0.5, 3.0, 1.0).unwrap();
        let s = Scenario::joint(frailty, modifier, CopulaSpec::independent()).unwrap();
        let n = 200_000;
        let cohort = simulate_cohort(&s, &SimConfig::new(n, 8).with_followup(6.0)).unwrap();
        let frac = cohort.deaths().count() as f64 / n as f64;
        let s0 = analytic::survival_curve(&s, Arm::Unexposed, 6.0).unwrap();
        let s1 = analytic::survival_curve(&s, Arm::Exposed, 6.0).unwrap();
        let p = 1.0 - 0.5 * (s0 + s1);
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((frac - p).abs() < 3.0 * se, "{frac} vs {p}");
    }

    #[test]
    fn cox_fit_on_proportional_hazards() {
        let null = Scenario::frailty_only(point(1.0), 1.0).unwrap();
        let fit = fit_cox_binary(&simulate_cohort(&null, &SimConfig::new(20_000, 1)).unwrap()).unwrap();
        assert!(fit.log_hr.abs() < 3.0 * fit.std_error, "{fit:?}");
        let ph = Scenario::frailty_only(point(1.0), 3.0).unwrap();
        let fit = fit_cox_binary(&simulate_cohort(&ph, &SimConfig::new(100_000, 2).with_censor_rate(0.2)).unwrap()).unwrap();
        assert!((fit.log_hr - 3f64.ln()).abs() < 3.0 * fit.std_error, "{fit:?}");
        let est = cox_estimand(&ph, &SimConfig::new(1000, 3)).unwrap();
        assert!((est.value - 3.0).abs() < 1e-14);
    }

    #[test]
    fn sweep_matches_separate_runs() {
        let f = DistributionSpec::gamma(1.0, 1.0).unwrap();
        let m = DistributionSpec::bhn(0.05, 0.5, 0.8, 3.5).unwrap();
        let s = Scenario::joint(f, m, CopulaSpec::independent()).unwrap();
        let config = SimConfig::new(20_000, 9).with_censor_rate(0.3);
        let sweep = cox_estimand_sweep(&s, &[1.0, 3.0, 6.0], &config).unwrap();
        for (f, est) in [1.0, 3.0, 6.0].into_iter().zip(&sweep) {
            let single = cox_estimand(&s, &config.with_followup(f)).unwrap();
            assert_eq!(single.deaths, est.deaths);
            assert!((single.value - est.value).abs() < 1e-12 * est.value);
            assert!((single.std_error - est.std_error).abs() < 1e-8 * est.std_error);
        }
        assert!(cox_estimand_sweep(&s, &[0.0], &config).is_err());
    }

    #[test]
    fn cox_fit_matches_textbook_example() {
        // small cohort with a tie at t = 2, checked against a grid search of
        // the Breslow partial likelihood written out by hand
        let rec = |arm, t, death| SubjectRecord {
            arm,
            u0: 1.0,
            u1: 1.0,
            event_time: t,
            observed_time: t,
            event_flag: if death { EventFlag::Death } else { EventFlag::Censored },
        };
        let cohort = SimulatedCohort {
            records: vec![
                rec(Arm::Exposed, 1.0, true),
                rec(Arm::Unexposed, 2.0, true),
                rec(Arm::Exposed, 3.0, true),
                rec(Arm::Unexposed, 4.0, false),
                rec(Arm::Exposed, 2.0, true),
            ],
        };
        let fit = fit_cox_binary(&cohort).unwrap();
        let loglik = |b: f64| {
            let e = b.exp();
            // risk sets (exposed, unexposed): t=1 (3, 2); t=2 (2, 2) with two deaths; t=3 (1, 1)
            b - (2.0 + 3.0 * e).ln() + b - 2.0 * (2.0 + 2.0 * e).ln() + b - (1.0 + e).ln()
        };
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut b = -5.0;
        while b < 5.0 {
            if loglik(b) > best.0 {
                best = (loglik(b), b);
            }
            b += 1e-5;
        }
        assert!((fit.log_hr - best.1).abs() < 2e-5, "{fit:?} vs {}", best.1);
        let empty = SimulatedCohort {
            records: vec![rec(Arm::Exposed, 1.0, true), rec(Arm::Unexposed, 2.0, false)],
        };
        assert!(matches!(fit_cox_binary(&empty), Err(Error::EmptyArm { unexposed: 0, exposed: 1 })));
    }

    #[test]
    fn ks_statistic_basics() {
        let mut xs: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_statistic(&mut xs, |x| x) <= 0.0005 + 1e-12);
        let mut ys = vec![0.5, f64::INFINITY];
        assert!((ks_statistic(&mut ys, |x| x) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn event_times_follow_laplace_survival() {
        let frailty = DistributionSpec::gamma(1.0, 1.0).unwrap();
        let s = Scenario::frailty_only(frailty, 1.0).unwrap();
        let n = 100_000;
        let mut times = sample_event_times(&s, Arm::Unexposed, &SimConfig::new(n, 21)).unwrap();
        let d = ks_statistic(&mut times, |t| 1.0 - analytic::survival_curve(&s, Arm::Unexposed, t).unwrap());
        assert!(d < ks_critical_1pct(n), "{d}");
    }
}
