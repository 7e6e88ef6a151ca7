use chr_core::simulate::{cox_estimand, empirical_mchr, fit_cox_binary, simulate_cohort};
use chr_core::{analytic, CopulaSpec, DistributionSpec, Family, Scenario, SimConfig};

fn gamma_frailty_scenario() -> Scenario {
    let f = DistributionSpec::from_mean_var(Family::Gamma, 1.0, 1.0).unwrap();
    Scenario::frailty_only(f, 3.0).unwrap()
}

#[test]
fn weighted_mchr_tracks_closed_form() {
    let s = gamma_frailty_scenario();
    let grid = [0.0, 2.0, 4.0, 6.0];
    let emp = empirical_mchr(&s, &grid, &SimConfig::new(200_000, 11)).unwrap();
    for (i, &t) in grid.iter().enumerate() {
        let x = t * t * t / 60.0;
        let want = 3.0 * (1.0 + x) / (1.0 + 3.0 * x);
        let got = emp.curve.values[i];
        assert!((got - want).abs() < 4.0 * emp.std_errors[i] + 1e-9, "t {t}: {got} vs {want}");
    }
}

#[test]
fn cohort_is_worker_invariant() {
    let s = gamma_frailty_scenario();
    let base = SimConfig::new(30_000, 5).with_followup(6.0).with_censor_rate(0.3);
    let one = simulate_cohort(&s, &base).unwrap();
    let four = simulate_cohort(&s, &base.with_workers(4)).unwrap();
    assert_eq!(one, four);
    let a = cox_estimand(&s, &base).unwrap();
    let b = cox_estimand(&s, &base.with_workers(3)).unwrap();
    assert_eq!(a.value.to_bits(), b.value.to_bits());
}

#[test]
fn censoring_respects_followup() {
    let s = gamma_frailty_scenario();
    let cohort = simulate_cohort(&s, &SimConfig::new(10_000, 2).with_followup(3.0).with_censor_rate(1.0)).unwrap();
    assert!(cohort.records.iter().all(|r| r.observed_time <= 3.0 && r.observed_time <= r.event_time));
}

#[test]
fn cox_fit_recovers_constant_ratio_without_frailty() {
    let f = DistributionSpec::degenerate(1.0).unwrap();
    let s = Scenario::frailty_only(f, 2.0).unwrap();
    let cohort = simulate_cohort(&s, &SimConfig::new(40_000, 9).with_followup(5.0)).unwrap();
    let fit = fit_cox_binary(&cohort).unwrap();
    assert!((fit.log_hr - 2f64.ln()).abs() < 4.0 * fit.std_error, "{fit:?}");
}

#[test]
fn dependent_scenarios_have_no_closed_form() {
    let f = DistributionSpec::from_mean_var(Family::Gamma, 1.0, 1.0).unwrap();
    let m = DistributionSpec::from_mean_var(Family::Gamma, 3.0, 1.0).unwrap();
    let s = Scenario::joint(f, m, CopulaSpec::gaussian(0.5).unwrap()).unwrap();
    assert!(analytic::mchr(&s, 1.0).is_err());
    assert!(empirical_mchr(&s, &[0.0, 1.0], &SimConfig::new(20_000, 1)).is_ok());
}
