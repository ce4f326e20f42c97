//! Gauss–Hermite rules (probabilists' convention) and adaptive
//! Gauss–Hermite integration in log space.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::family::softplus;

pub const MAX_NODES: usize = 100;

/// Nodes and weights with `Σ w_k f(x_k) ≈ ∫ f(x) φ(x) dx`, `φ` the
/// standard normal density. Weights sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadRule {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `E f(Z)` for `Z ~ N(0, 1)`.
    pub fn expect<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Orthonormal probabilists' Hermite values `p_{N-1}(x), p_N(x)` and `Σ_{k<N} p_k(x)²`.
fn hermite_orthonormal(n: usize, x: f64) -> (f64, f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    let mut sumsq = 0.0;
    for k in 0..n {
        sumsq += cur * cur;
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (prev, cur, sumsq)
}

/// `N`-point Gauss–Hermite rule for the standard normal weight.
///
/// Nodes come from the Golub–Welsch eigenproblem, are polished by Newton's
/// method on the orthonormal recurrence, and weights use the Christoffel
/// function `1 / Σ p_k(x)²`.
pub fn gauss_hermite(n: usize) -> Result<QuadRule> {
    if n == 0 || n > MAX_NODES {
        return Err(Error::Quadrature(format!(
            "node count must lie in 1..={MAX_NODES}, got {n}"
        )));
    }
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let off = (k as f64).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.total_cmp(b));
    for x in nodes.iter_mut() {
        for _ in 0..8 {
            let (pm1, pn, _) = hermite_orthonormal(n, *x);
            let step = pn / ((n as f64).sqrt() * pm1);
            *x -= step;
            if step.abs() <= 1e-16 * x.abs().max(1.0) {
                break;
            }
        }
    }
    // Enforce exact symmetry about zero.
    for k in 0..n / 2 {
        let half = 0.5 * (nodes[n - 1 - k] - nodes[k]);
        nodes[k] = -half;
        nodes[n - 1 - k] = half;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    let weights: Vec<f64> = nodes.iter().map(|&x| 1.0 / hermite_orthonormal(n, x).2).collect();
    Ok(QuadRule { nodes, weights })
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `log ∫ exp(f(x)) dx` with nodes recentred at `mode` and scaled by
/// `1/√curvature`, where `curvature = -f''(mode)`.
pub fn aghq_1d<F: Fn(f64) -> f64>(f: F, mode: f64, curvature: f64, rule: &QuadRule) -> Result<f64> {
    if !(curvature.is_finite() && curvature > 0.0) {
        return Err(Error::Quadrature(format!("curvature must be positive, got {curvature}")));
    }
    let scale = curvature.sqrt().recip();
    let mut terms = Vec::with_capacity(rule.len());
    for (&z, &w) in rule.nodes().iter().zip(rule.weights()) {
        let fx = f(mode + scale * z);
        if !fx.is_finite() && fx != f64::NEG_INFINITY {
            return Err(Error::Quadrature(format!("non-finite integrand at x = {}", mode + scale * z)));
        }
        terms.push(w.ln() + fx + 0.5 * z * z + HALF_LN_2PI);
    }
    Ok(scale.ln() + log_sum_exp(&terms))
}

/// Mode and curvature of a smooth unimodal log-integrand by a 20-step
/// safeguarded Newton search with finite-difference derivatives.
pub fn find_mode<F: Fn(f64) -> f64>(f: F, start: f64) -> Result<(f64, f64)> {
    let derivs = |x: f64| {
        let h = 1e-4 * x.abs().max(1.0);
        let (lo, mid, hi) = (f(x - h), f(x), f(x + h));
        (mid, (hi - lo) / (2.0 * h), (hi - 2.0 * mid + lo) / (h * h))
    };
    let mut x = start;
    let (mut fx, mut d1, mut d2) = derivs(x);
    if !fx.is_finite() {
        return Err(Error::Quadrature(format!("log-integrand not finite at start {start}")));
    }
    for _ in 0..20 {
        let mut step = if d2 < 0.0 { -d1 / d2 } else { d1.signum() * d1.abs().min(1.0) };
        let mut accepted = false;
        for _ in 0..30 {
            let trial = x + step;
            let ft = f(trial);
            if ft.is_finite() && ft >= fx - 1e-14 * fx.abs() {
                x = trial;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        let converged = !accepted || step.abs() <= 1e-10 * x.abs().max(1.0);
        (fx, d1, d2) = derivs(x);
        if converged || d1 == 0.0 {
            break;
        }
    }
    if !(d2 < 0.0 && d2.is_finite()) {
        return Err(Error::Quadrature(format!(
            "mode search ended at x = {x} with non-negative curvature {d2}"
        )));
    }
    // Refine the curvature on the integrand's own scale with Richardson
    // extrapolation, which keeps roundoff small.
    let second = |h: f64| (f(x + h) - 2.0 * fx + f(x - h)) / (h * h);
    let h = 0.05 / (-d2).sqrt();
    let refined = -(4.0 * second(h) - second(2.0 * h)) / 3.0;
    let curvature = if refined.is_finite() && refined > 0.0 { refined } else { -d2 };
    Ok((x, curvature))
}

/// Adaptive Gauss–Hermite with the mode located by [`find_mode`].
pub fn aghq_1d_auto<F: Fn(f64) -> f64>(f: F, start: f64, rule: &QuadRule) -> Result<f64> {
    let (mode, curvature) = find_mode(&f, start)?;
    aghq_1d(f, mode, curvature, rule)
}

/// `E log(1 + exp(η + U + V))` for `U ~ N(μ_u, λ_u)`, `V ~ N(μ_v, λ_v)`
/// by an `N1 × N2` product rule.
pub fn logistic_e_btheta_2d(
    eta: f64,
    mu_u: f64,
    lam_u: f64,
    mu_v: f64,
    lam_v: f64,
    rule_u: &QuadRule,
    rule_v: &QuadRule,
) -> f64 {
    let (su, sv) = (lam_u.max(0.0).sqrt(), lam_v.max(0.0).sqrt());
    rule_u.expect(|zu| rule_v.expect(|zv| softplus(eta + mu_u + su * zu + mu_v + sv * zv)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn small_rules() {
        let r1 = gauss_hermite(1).unwrap();
        assert_eq!(r1.nodes(), &[0.0]);
        assert_abs_diff_eq!(r1.weights()[0], 1.0, epsilon = 1e-15);
        let r10 = gauss_hermite(10).unwrap();
        assert_abs_diff_eq!(r10.expect(|x| x * x), 1.0, epsilon = 1e-12);
        let r20 = gauss_hermite(20).unwrap();
        assert_abs_diff_eq!(r20.expect(f64::exp), 0.5f64.exp(), epsilon = 1e-10);
        assert_abs_diff_eq!(r20.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn node_count_is_range_checked() {
        assert!(gauss_hermite(0).is_err());
        assert!(gauss_hermite(101).is_err());
        assert!(gauss_hermite(100).is_ok());
    }

    #[test]
    fn aghq_exact_for_gaussian_log_density() {
        let f = |x: f64| -0.5 * (x - 3.0).powi(2) / 4.0 - 0.5 * (2.0 * std::f64::consts::PI * 4.0).ln();
        for n in [1, 2, 7, 15] {
            let rule = gauss_hermite(n).unwrap();
            assert_abs_diff_eq!(aghq_1d(f, 3.0, 0.25, &rule).unwrap(), 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(aghq_1d_auto(f, 0.0, &rule).unwrap(), 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn aghq_rejects_bad_curvature() {
        let rule = gauss_hermite(5).unwrap();
        assert!(aghq_1d(|x| -x * x, 0.0, 0.0, &rule).is_err());
        assert!(find_mode(|x| x * x, 1.0).is_err());
    }

    /// Row-composite Poisson block for one row with two cells against a
    /// trapezoid rule on [-10σ, 10σ] with 10⁶ points.
    #[test]
    fn aghq_matches_dense_trapezoid_on_poisson_row() {
        let (sigma2, y, eta) = (0.6f64, [2.0f64, 0.0], [0.3f64, -0.5]);
        let f = |u: f64| {
            let mut v = -0.5 * u * u / sigma2 - 0.5 * (2.0 * std::f64::consts::PI * sigma2).ln();
            for k in 0..2 {
                v += y[k] * (eta[k] + u) - (eta[k] + u).exp() - statrs::function::gamma::ln_gamma(y[k] + 1.0);
            }
            v
        };
        let rule = gauss_hermite(30).unwrap();
        let quad = aghq_1d_auto(f, 0.0, &rule).unwrap();
        let s = sigma2.sqrt();
        let (lo, hi, npts) = (-10.0 * s, 10.0 * s, 1_000_000usize);
        let h = (hi - lo) / (npts - 1) as f64;
        let mut acc = 0.0;
        for k in 0..npts {
            let w = if k == 0 || k == npts - 1 { 0.5 } else { 1.0 };
            acc += w * f(lo + k as f64 * h).exp();
        }
        assert_abs_diff_eq!(quad, (acc * h).ln(), epsilon = 1e-8);
    }

    #[test]
    fn logistic_one_dimensional_integral_self_converges() {
        let (eta, mu, lam) = (0.4, -0.3, 0.8);
        let f = |u: f64| {
            let prior = -0.5 * (u - mu) * (u - mu) / lam - 0.5 * (2.0 * std::f64::consts::PI * lam).ln();
            prior + (eta + u) - softplus(eta + u)
        };
        let a = aghq_1d_auto(f, mu, &gauss_hermite(10).unwrap()).unwrap();
        let b = aghq_1d_auto(f, mu, &gauss_hermite(30).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }

    #[test]
    fn logistic_2d_limits_and_monotonicity() {
        let r = gauss_hermite(15).unwrap();
        assert!(logistic_e_btheta_2d(-50.0, 0.0, 1.0, 0.0, 1.0, &r, &r) < 1e-15);
        assert_abs_diff_eq!(logistic_e_btheta_2d(40.0, 0.0, 0.0, 0.0, 0.0, &r, &r), 40.0, epsilon = 1e-12);
        let base = logistic_e_btheta_2d(0.1, 0.2, 0.5, -0.1, 0.3, &r, &r);
        assert!(logistic_e_btheta_2d(0.2, 0.2, 0.5, -0.1, 0.3, &r, &r) > base);
        assert!(logistic_e_btheta_2d(0.1, 0.2, 0.6, -0.1, 0.3, &r, &r) > base);
        assert!(logistic_e_btheta_2d(0.1, 0.2, 0.5, -0.1, 0.4, &r, &r) > base);
    }

    #[test]
    fn logistic_2d_matches_monte_carlo() {
        let r = gauss_hermite(30).unwrap();
        let quad = logistic_e_btheta_2d(0.0, 0.0, 1.0, 0.0, 1.0, &r, &r);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..draws {
            let zu: f64 = rng.sample(StandardNormal);
            let zv: f64 = rng.sample(StandardNormal);
            let v = softplus(zu + zv);
            s += v;
            s2 += v * v;
        }
        let mean = s / draws as f64;
        let se = ((s2 / draws as f64 - mean * mean) / draws as f64).sqrt();
        assert!((quad - mean).abs() < 4.0 * se, "{quad} vs {mean} ± {se}");
    }
}
