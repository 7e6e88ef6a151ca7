use chr_core::analytic::{self, cond_exp_given_survival};
use chr_core::{Arm, BaselineHazard, CopulaSpec, DistributionSpec, Estimand, Family, Scenario};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

#[test]
fn gamma_frailty_mchr_matches_rational_form() {
    let baseline = BaselineHazard::default();
    for theta in [0.5, 1.0, 2.0] {
        let f = DistributionSpec::from_mean_var(Family::Gamma, 1.0, theta).unwrap();
        for c in [3.0, 1.0 / 3.0] {
            for t in [0.0, 1.5, 4.0, 9.0] {
                let x = t * t * t / 60.0;
                let want = c * (1.0 + theta * x) / (1.0 + theta * c * x);
                let got = analytic::mchr_frailty_only(&f, c, &baseline, t).unwrap();
                assert!(close(got, want, 1e-12), "theta {theta} c {c} t {t}: {got} vs {want}");
            }
        }
    }
}

// Survivor mean of an inverse Gaussian by brute-force Simpson integration of its density.
fn invgauss_survivor_mean(mu: f64, lambda: f64, x: f64) -> f64 {
    let pdf = |u: f64| {
        if u <= 0.0 {
            0.0
        } else {
            (lambda / (2.0 * std::f64::consts::PI * u.powi(3))).sqrt()
                * (-lambda * (u - mu).powi(2) / (2.0 * mu * mu * u)).exp()
        }
    };
    let (a, b, n) = (0.0, 60.0, 600_000);
    let h = (b - a) / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..=n {
        let u = a + i as f64 * h;
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let g = pdf(u) * (-u * x).exp();
        num += w * u * g;
        den += w * g;
    }
    num / den
}

#[test]
fn invgauss_survivor_mean_matches_quadrature() {
    let f = DistributionSpec::from_mean_var(Family::InverseGaussian, 1.0, 0.5).unwrap();
    for x in [0.0, 0.3, 2.0, 10.0] {
        let want = invgauss_survivor_mean(1.0, 2.0, x);
        let got = cond_exp_given_survival(&f, x).unwrap();
        assert!(close(got, want, 1e-7), "x {x}: {got} vs {want}");
    }
}

#[test]
fn bhn_modifier_curve_is_a_reweighted_mixture() {
    let m = DistributionSpec::bhn(0.05, 0.5, 0.3, 7.0).unwrap();
    let baseline = BaselineHazard::default();
    let atoms: [(f64, f64); 3] = [(0.05, 0.5), (0.65, 1.0), (0.3, 7.0)];
    for t in [0.0, 1.0, 3.0, 6.0, 12.0] {
        let x = t * t * t / 60.0;
        let den: f64 = atoms.iter().map(|(p, u)| p * (-u * x).exp()).sum();
        let num: f64 = atoms.iter().map(|(p, u)| p * u * (-u * x).exp()).sum();
        let got = analytic::mchr_modifier_only(&m, &baseline, t).unwrap();
        assert!(close(got, num / den, 1e-12), "t {t}");
    }
}

#[test]
fn bhn_from_moments_hits_requested_moments() {
    for (p1, mu1, mean, var) in [(0.05, 0.5, 3.0, 1.0), (0.9, 0.1, 1.0 / 3.0, 0.5), (0.05, 0.5, 3.0, 2.0)] {
        let m = DistributionSpec::bhn_from_moments(p1, mu1, mean, var).unwrap();
        assert!(close(m.mean(), mean, 1e-10));
        assert!(close(m.variance(), var, 1e-10));
    }
}

#[test]
fn joint_mchr_starts_at_chr_and_reaches_its_limit() {
    let f = DistributionSpec::from_mean_var(Family::Gamma, 1.0, 1.0).unwrap();
    let m = DistributionSpec::bhn_from_moments(0.05, 0.5, 3.0, 1.0).unwrap();
    let s = Scenario::joint(f, m, CopulaSpec::independent()).unwrap();
    assert!(close(analytic::mchr(&s, 0.0).unwrap(), 3.0, 1e-12));
    assert!(close(analytic::chr(&s).unwrap(), 3.0, 1e-12));
    let limit = analytic::mchr_limit(&s).unwrap();
    assert!(close(analytic::mchr(&s, 200.0).unwrap(), limit, 1e-2));
}

#[test]
fn survival_curve_agrees_with_laplace_transform() {
    let f = DistributionSpec::from_mean_var(Family::Gamma, 1.0, 2.0).unwrap();
    let s = Scenario::frailty_only(f, 3.0).unwrap();
    for t in [0.0f64, 2.0, 5.0] {
        let x = t * t * t / 60.0;
        // Gamma(1/2, 2) Laplace transform: (1 + 2x)^(-1/2).
        let s0 = (1.0 + 2.0 * x).powf(-0.5);
        let s1 = (1.0 + 6.0 * x).powf(-0.5);
        assert!(close(analytic::survival_curve(&s, Arm::Unexposed, t).unwrap(), s0, 1e-12));
        assert!(close(analytic::survival_curve(&s, Arm::Exposed, t).unwrap(), s1, 1e-12));
    }
}

#[test]
fn curve_rejects_negative_times() {
    let f = DistributionSpec::from_mean_var(Family::Gamma, 1.0, 1.0).unwrap();
    let s = Scenario::frailty_only(f, 3.0).unwrap();
    assert!(analytic::curve(&s, Estimand::Mchr, &[0.0, -1.0]).is_err());
}

#[test]
fn scenario_config_round_trips() {
    let f = DistributionSpec::from_mean_var(Family::CompoundPoisson, 1.0, 0.5).unwrap();
    let m = DistributionSpec::from_mean_var(Family::Gamma, 3.0, 1.0).unwrap();
    let s = Scenario::joint(f, m, CopulaSpec::gaussian(0.5).unwrap()).unwrap();
    let back = Scenario::from_config_str(&s.to_config_string()).unwrap();
    assert_eq!(back, s);
}
