//! Small numerical kernels shared by the analytic and Monte Carlo layers:
//! standard-normal helpers, adaptive Gauss–Kronrod quadrature, CDF inversion,
//! order-fixed summation and shape-preserving interpolation.

use std::collections::BinaryHeap;
use std::f64::consts::SQRT_2;

use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// Standard normal quantile, polished with one Newton step.
pub fn normal_quantile(p: f64) -> f64 {
    let z = -SQRT_2 * erfc_inv(2.0 * p);
    if !z.is_finite() {
        return z;
    }
    let density = normal_pdf(z);
    if density > 0.0 {
        z - (normal_cdf(z) - p) / density
    } else {
        z
    }
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

// Kronrod 15-point abscissae and weights; every other node is the embedded
// 7-point Gauss–Legendre rule.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_94,
    0.417_959_183_673_469_4,
];

const MAX_INTERVALS: usize = 4000;

#[derive(Debug, Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Panel {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for (j, (&x, &w)) in XGK.iter().zip(WGK.iter()).take(7).enumerate() {
        let dx = half * x;
        let pair = f(center - dx) + f(center + dx);
        kronrod += w * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    Panel {
        a,
        b,
        value: kronrod * half,
        error: ((kronrod - gauss) * half).abs(),
    }
}

/// Globally adaptive Gauss–Kronrod (7/15) quadrature of `f` over `[a, b]`.
///
/// The panel with the largest error estimate is bisected until the summed
/// error estimate drops below `abs_tol`. Interior `breaks` (points where `f`
/// has kinks or jumps) seed the initial partition.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, breaks: &[f64], abs_tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let mut points = vec![a];
    points.extend(breaks.iter().copied().filter(|&x| x > a && x < b));
    points.push(b);
    points.sort_by(f64::total_cmp);
    points.dedup();

    let mut heap: BinaryHeap<Panel> = points.windows(2).map(|w| gk15(&f, w[0], w[1])).collect();
    loop {
        let total_error: f64 = heap.iter().map(|p| p.error).sum();
        if total_error <= abs_tol {
            break;
        }
        if heap.len() >= MAX_INTERVALS {
            let estimate = heap.iter().map(|p| p.value).sum();
            return Err(Error::QuadratureNonConvergence {
                estimate,
                error_estimate: total_error,
                tolerance: abs_tol,
                intervals: heap.len(),
            });
        }
        let worst = heap.pop().expect("non-empty partition");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // Panel is at machine resolution; accept what we have.
            heap.push(Panel { error: 0.0, ..worst });
            continue;
        }
        heap.push(gk15(&f, worst.a, mid));
        heap.push(gk15(&f, mid, worst.b));
    }
    let mut values: Vec<f64> = heap.into_iter().map(|p| p.value).collect();
    values.sort_by(f64::total_cmp);
    Ok(pairwise_sum(&values))
}

/// Integral over `[a, ∞)` through the substitution `x = a + s / (1 - s)`.
pub fn integrate_to_infinity<F: Fn(f64) -> f64>(f: F, a: f64, breaks: &[f64], abs_tol: f64) -> Result<f64> {
    let mapped = |s: f64| {
        if s >= 1.0 {
            return 0.0;
        }
        let one_minus = 1.0 - s;
        let x = a + s / one_minus;
        let v = f(x) / (one_minus * one_minus);
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    let s_breaks: Vec<f64> = breaks
        .iter()
        .filter(|&&x| x > a && x.is_finite())
        .map(|&x| (x - a) / (1.0 + x - a))
        .collect();
    integrate(mapped, 0.0, 1.0, &s_breaks, abs_tol)
}

/// Order-fixed pairwise (tree) summation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Probability-scale tolerance used when inverting CDFs.
pub const QUANTILE_TOL: f64 = 1e-10;

/// Generalized inverse of a continuous CDF on `(0, ∞)`.
///
/// Newton iteration aimed at `u + QUANTILE_TOL / 2`, safeguarded by a
/// bracket `cdf(lo) < u <= cdf(hi)`: any step that leaves the bracket is
/// replaced by bisection (geometric while the bracket is open above). The
/// returned point always satisfies `u <= cdf(x) <= u + QUANTILE_TOL`, or is
/// the upper bracket end once the bracket has collapsed to rounding level.
pub fn invert_cdf<C, D>(cdf: C, pdf: D, u: f64, guess: f64) -> f64
where
    C: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
{
    let target = u + 0.5 * QUANTILE_TOL;
    let mut x = if guess.is_finite() && guess > 0.0 { guess } else { 1.0 };
    let mut lo = 0.0;
    let mut hi = f64::INFINITY;
    for _ in 0..400 {
        let fx = cdf(x);
        if fx >= u {
            hi = x;
            if fx - u <= QUANTILE_TOL {
                return x;
            }
        } else {
            lo = x;
        }
        if hi.is_finite() && hi - lo <= 4.0 * f64::EPSILON * hi {
            return hi;
        }
        let density = pdf(x);
        let newton = x - (fx - target) / density;
        x = if density > 0.0 && newton > lo && newton < hi {
            newton
        } else if hi.is_infinite() {
            2.0 * x.max(lo)
        } else if lo <= 0.0 {
            0.5 * hi
        } else if hi / lo > 1.5 {
            (lo * hi).sqrt()
        } else {
            0.5 * (lo + hi)
        };
        if lo <= 0.0 && x < f64::MIN_POSITIVE {
            return hi;
        }
    }
    if hi.is_finite() {
        hi
    } else {
        f64::MAX
    }
}

/// Monotone piecewise-cubic Hermite interpolant (Fritsch–Carlson slopes).
#[derive(Debug, Clone)]
pub struct Pchip {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl Pchip {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() != ys.len() || xs.len() < 2 {
            return Err(Error::InvalidGrid(
                "interpolation needs at least two matching abscissae/ordinates".into(),
            ));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("abscissae must be strictly ascending".into()));
        }
        let n = xs.len();
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
        let mut slopes = vec![0.0; n];
        if n == 2 {
            slopes[0] = delta[0];
            slopes[1] = delta[0];
        } else {
            for k in 1..n - 1 {
                let (d0, d1) = (delta[k - 1], delta[k]);
                if d0 * d1 > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    slopes[k] = (w1 + w2) / (w1 / d0 + w2 / d1);
                }
            }
            slopes[0] = edge_slope(h[0], h[1], delta[0], delta[1]);
            slopes[n - 1] = edge_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Ok(Self { xs, ys, slopes })
    }

    /// Evaluates the interpolant; arguments outside the knot range are clamped.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1];
        }
        let k = self.xs.partition_point(|&v| v <= x) - 1;
        let h = self.xs[k + 1] - self.xs[k];
        let s = (x - self.xs[k]) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.ys[k] + h10 * h * self.slopes[k] + h01 * self.ys[k + 1] + h11 * h * self.slopes[k + 1]
    }
}

fn edge_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d * d0 <= 0.0 {
        0.0
    } else if d0 * d1 <= 0.0 && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_round_trip() {
        for &p in &[1e-12, 0.01, 0.3, 0.5, 0.9, 0.999_999] {
            let z = normal_quantile(p);
            assert!((normal_cdf(z) - p).abs() < 1e-14 * p.max(1e-3) * 1e3, "p={p}");
        }
        assert_eq!(normal_quantile(0.5), 0.0);
    }

    #[test]
    fn gauss_kronrod_polynomials_and_exponentials() {
        let v = integrate(|x| x.powi(5) - 2.0 * x, 0.0, 2.0, &[], 1e-13).unwrap();
        assert!((v - (64.0 / 6.0 - 4.0)).abs() < 1e-12);
        let v = integrate_to_infinity(|x| (-x).exp(), 0.0, &[], 1e-12).unwrap();
        assert!((v - 1.0).abs() < 1e-11);
        // integrable endpoint singularity
        let v = integrate(|x| 1.0 / x.sqrt(), 0.0, 1.0, &[], 1e-8).unwrap();
        assert!((v - 2.0).abs() < 1e-7);
    }

    #[test]
    fn gauss_kronrod_respects_breakpoints() {
        let step = |x: f64| if x < 0.3 { 1.0 } else { 5.0 };
        let v = integrate(step, 0.0, 1.0, &[0.3], 1e-12).unwrap();
        assert!((v - (0.3 + 3.5)).abs() < 1e-12);
    }

    #[test]
    fn quadrature_reports_non_convergence() {
        let err = integrate(|x| (1.0 / x).sin() / x, 0.0, 1.0, &[], 1e-14).unwrap_err();
        assert!(matches!(err, Error::QuadratureNonConvergence { .. }));
    }

    #[test]
    fn invert_exponential_cdf() {
        let cdf = |x: f64| -(-x).exp_m1();
        let pdf = |x: f64| (-x).exp();
        for &u in &[1e-9, 0.01, 0.5, 0.99, 1.0 - 1e-9] {
            let q = invert_cdf(cdf, pdf, u, 1.0);
            let exact = -(-u).ln_1p();
            assert!(cdf(q) >= u);
            assert!((q - exact).abs() <= 1e-9 * exact.max(1.0) / pdf(exact).max(1e-9), "u={u}");
        }
    }

    #[test]
    fn pairwise_sum_matches_naive_on_small_inputs() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
    }

    #[test]
    fn pchip_is_exact_on_lines_and_preserves_monotonicity() {
        let xs: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let line = Pchip::new(xs.clone(), xs.iter().map(|x| 2.0 * x + 1.0).collect()).unwrap();
        assert!((line.eval(2.5) - 6.0).abs() < 1e-14);

        let steps = Pchip::new(xs, vec![0.0, 0.0, 1.0, 1.0, 1.0, 3.0]).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=500 {
            let y = steps.eval(i as f64 / 100.0);
            assert!(y >= prev - 1e-15);
            prev = y;
        }
        assert_eq!(steps.eval(3.5), 1.0);
    }

    #[test]
    fn pchip_rejects_unsorted_knots() {
        assert!(Pchip::new(vec![0.0, 0.0, 1.0], vec![1.0, 2.0, 3.0]).is_err());
    }
}
