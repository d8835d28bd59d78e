//! Independent numerical references used by tests and the self-check.

use std::f64::consts::PI;

/// Adaptive Simpson integration of `f` over `[a, b]` to absolute tolerance
/// `tol`.
pub fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, 48)
}

/// `KL(N(mu, sigma²) ‖ N(0, 1))` by integrating `p ln(p/q)` over
/// `[mu − 10σ, mu + 10σ]`.
pub fn kl_by_quadrature(mu: f64, sigma: f64) -> f64 {
    let log_norm = -0.5 * (2.0 * PI).ln();
    let integrand = |x: f64| {
        let z = (x - mu) / sigma;
        let log_p = log_norm - sigma.ln() - 0.5 * z * z;
        let log_q = log_norm - 0.5 * x * x;
        log_p.exp() * (log_p - log_q)
    };
    // split at the mean so both halves start smooth
    adaptive_simpson(&integrand, mu - 10.0 * sigma, mu, 1e-11)
        + adaptive_simpson(&integrand, mu, mu + 10.0 * sigma, 1e-11)
}

/// One-sample Kolmogorov–Smirnov test against `U(lo, hi)`; returns
/// `(statistic, asymptotic p-value)`.
pub fn ks_uniform(samples: &[f64], lo: f64, hi: f64) -> (f64, f64) {
    let mut xs: Vec<f64> = samples.iter().map(|x| (x - lo) / (hi - lo)).collect();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let cdf = x.clamp(0.0, 1.0);
        d = d.max((i as f64 + 1.0) / n - cdf).max(cdf - i as f64 / n);
    }
    (d, kolmogorov_sf((n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d))
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_sf(t: f64) -> f64 {
    if t < 1e-3 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..200 {
        let k = k as f64;
        let term = (-2.0 * k * k * t * t).exp();
        s += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Two-sided binomial tolerance: `z` standard deviations of a proportion.
pub fn binomial_halfwidth(p: f64, n: usize, z: f64) -> f64 {
    z * (p * (1.0 - p) / n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_integrates_known_functions() {
        let v = adaptive_simpson(&|x: f64| x.sin(), 0.0, PI, 1e-12);
        assert!((v - 2.0).abs() < 1e-10);
        let g = adaptive_simpson(&|x: f64| (-0.5 * x * x).exp(), -12.0, 12.0, 1e-12);
        assert!((g - (2.0 * PI).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn quadrature_kl_of_unit_gaussian_is_zero() {
        assert!(kl_by_quadrature(0.0, 1.0).abs() < 1e-9);
        assert!((kl_by_quadrature(1.0, 1.0) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn ks_accepts_uniform_grid_and_rejects_skew() {
        let grid: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_uniform(&grid, 0.0, 1.0).1 > 0.99);
        let skew: Vec<f64> = grid.iter().map(|x| x * x).collect();
        assert!(ks_uniform(&skew, 0.0, 1.0).1 < 1e-6);
    }
}
