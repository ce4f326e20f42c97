//! Independent references used by the integration tests: quadrature
//! log-likelihoods, finite-difference gradients and random instances.

#![allow(dead_code)]

use gvacl::family::log_density;
use gvacl::quadrature::{aghq_1d_auto, gauss_hermite, QuadRule};
use gvacl::{CompositeParams, Dataset, Family, ModelParams, VariationalParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn log_normal_density(x: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln()) - 0.5 * x * x / var
}

/// `log ∫ Π_j f(y_ij | η_ij + u + offset_j) N(u; 0, s2) du` for one row.
fn row_integral(
    data: &Dataset,
    i: usize,
    eta: &[f64],
    col_offsets: &[f64],
    s2: f64,
    rule: &QuadRule,
) -> f64 {
    let n = data.n();
    let f = |u: f64| {
        let mut v = log_normal_density(u, s2);
        for j in 0..n {
            v += log_density(data.family(), data.response(i, j), eta[i * n + j] + u + col_offsets[j]).unwrap();
        }
        v
    };
    aghq_1d_auto(f, 0.0, rule).expect("row integral")
}

fn linear_predictor(data: &Dataset, intercept: f64, slopes: &[f64]) -> Vec<f64> {
    data.slope_predictor(slopes).into_iter().map(|e| e + intercept).collect()
}

/// Marginal log-likelihood of the crossed model by nested adaptive
/// Gauss–Hermite quadrature: an outer integral per column effect, one level
/// at a time, around exact per-row integrals over `U_i`.
pub fn marginal_loglik(psi: &ModelParams, data: &Dataset, nodes: usize) -> f64 {
    let rule = gauss_hermite(nodes).unwrap();
    let eta = linear_predictor(data, psi.intercept(), psi.slopes());
    nested(psi, data, &eta, &rule, &vec![0.0; data.n()], 0)
}

fn nested(psi: &ModelParams, data: &Dataset, eta: &[f64], rule: &QuadRule, v: &[f64], level: usize) -> f64 {
    if level == data.n() {
        return (0..data.m())
            .map(|i| row_integral(data, i, eta, v, psi.sigma2_u, rule))
            .sum();
    }
    let f = |x: f64| {
        let mut inner = v.to_vec();
        inner[level] = x;
        log_normal_density(x, psi.sigma2_v) + nested(psi, data, eta, rule, &inner, level + 1)
    };
    aghq_1d_auto(f, 0.0, rule).expect("column integral")
}

/// Row-column composite log-likelihood: the row-only and column-only
/// marginal log-likelihoods added, each a product of 1-D integrals.
pub fn composite_loglik(psi: &CompositeParams, data: &Dataset, nodes: usize) -> f64 {
    let rule = gauss_hermite(nodes).unwrap();
    let zeros_n = vec![0.0; data.n()];
    let eta_r = linear_predictor(data, psi.beta0_r, &psi.slopes);
    let rows: f64 = (0..data.m())
        .map(|i| row_integral(data, i, &eta_r, &zeros_n, psi.sigma2_u, &rule))
        .sum();
    let transposed = transpose(data);
    let eta_c = linear_predictor(&transposed, psi.beta0_c, &psi.slopes);
    let zeros_m = vec![0.0; data.m()];
    let cols: f64 = (0..data.n())
        .map(|j| row_integral(&transposed, j, &eta_c, &zeros_m, psi.sigma2_v, &rule))
        .sum();
    rows + cols
}

pub fn transpose(data: &Dataset) -> Dataset {
    let (m, n, p) = (data.m(), data.n(), data.p());
    let mut y = Vec::with_capacity(m * n);
    let mut x = Vec::with_capacity(m * n * p);
    for j in 0..n {
        for i in 0..m {
            y.push(data.response(i, j));
            x.extend_from_slice(data.covariates(i, j));
        }
    }
    Dataset::new(n, m, p, y, x, data.family()).unwrap()
}

/// Central difference of `f` along coordinate `k` of `x`.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], k: usize) -> f64 {
    let h = 1e-5 * x[k].abs().max(1.0);
    let mut xp = x.to_vec();
    xp[k] += h;
    let mut xm = x.to_vec();
    xm[k] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Error scaled by the larger of the two magnitudes and 1.
pub fn scaled_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

pub fn random_dataset(rng: &mut ChaCha8Rng, family: Family, m: usize, n: usize, p: usize) -> Dataset {
    let x: Vec<f64> = (0..m * n * p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..m * n)
        .map(|_| match family {
            Family::Poisson => rng.random_range(0..5) as f64,
            Family::Gamma { .. } => rng.random_range(0.05..3.0),
            Family::LogisticExperimental => rng.random_range(0..2) as f64,
        })
        .collect();
    Dataset::new(m, n, p, y, x, family).unwrap()
}

pub fn random_model(rng: &mut ChaCha8Rng, p: usize) -> ModelParams {
    let beta = (0..=p).map(|_| rng.random_range(-1.0..0.5)).collect();
    ModelParams::new(beta, rng.random_range(0.05..1.5), rng.random_range(0.05..1.5)).unwrap()
}

pub fn random_composite(rng: &mut ChaCha8Rng, p: usize) -> CompositeParams {
    CompositeParams::new(
        rng.random_range(-1.0..0.5),
        rng.random_range(-1.0..0.5),
        (0..p).map(|_| rng.random_range(-1.0..1.0)).collect(),
        rng.random_range(0.05..1.5),
        rng.random_range(0.05..1.5),
    )
    .unwrap()
}

pub fn random_xi(rng: &mut ChaCha8Rng, m: usize, n: usize) -> VariationalParams {
    let mut draw = |k: usize, lo: f64, hi: f64| (0..k).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
    let mu_u = draw(m, -0.7, 0.7);
    let lam_u = draw(m, 0.02, 1.0);
    let mu_v = draw(n, -0.7, 0.7);
    let lam_v = draw(n, 0.02, 1.0);
    VariationalParams::new(mu_u, lam_u, mu_v, lam_v).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let k = v.len() as f64;
    let mean = v.iter().sum::<f64>() / k;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, var.sqrt())
}

fn push_xi(out: &mut Vec<f64>, xi: &VariationalParams) {
    out.extend(xi.mu_u.iter().chain(&xi.lam_u).chain(&xi.mu_v).chain(&xi.lam_v));
}

fn split_xi(x: &[f64], m: usize, n: usize) -> VariationalParams {
    VariationalParams {
        mu_u: x[..m].to_vec(),
        lam_u: x[m..2 * m].to_vec(),
        mu_v: x[2 * m..2 * m + n].to_vec(),
        lam_v: x[2 * m + n..].to_vec(),
    }
}

/// `[β, σ²_u, σ²_v, μ_u, λ_u, μ_v, λ_v]`.
pub fn flatten_full(psi: &ModelParams, xi: &VariationalParams) -> Vec<f64> {
    let mut x = psi.beta.clone();
    x.extend([psi.sigma2_u, psi.sigma2_v]);
    push_xi(&mut x, xi);
    x
}

pub fn unflatten_full(x: &[f64], p: usize, m: usize, n: usize) -> (ModelParams, VariationalParams) {
    let psi = ModelParams {
        beta: x[..p + 1].to_vec(),
        sigma2_u: x[p + 1],
        sigma2_v: x[p + 2],
    };
    (psi, split_xi(&x[p + 3..], m, n))
}

pub fn flatten_full_grad(g: &gvacl::elbo::FullGradient) -> Vec<f64> {
    let mut x = g.beta.clone();
    x.extend([g.sigma2_u, g.sigma2_v]);
    x.extend(g.mu_u.iter().chain(&g.lam_u).chain(&g.mu_v).chain(&g.lam_v));
    x
}

/// `[β₀ʳ, β₀ᶜ, slopes, σ²_u, σ²_v, μ_u, λ_u, μ_v, λ_v]`.
pub fn flatten_composite(psi: &CompositeParams, xi: &VariationalParams) -> Vec<f64> {
    let mut x = vec![psi.beta0_r, psi.beta0_c];
    x.extend_from_slice(&psi.slopes);
    x.extend([psi.sigma2_u, psi.sigma2_v]);
    push_xi(&mut x, xi);
    x
}

pub fn unflatten_composite(x: &[f64], p: usize, m: usize, n: usize) -> (CompositeParams, VariationalParams) {
    let psi = CompositeParams {
        beta0_r: x[0],
        beta0_c: x[1],
        slopes: x[2..2 + p].to_vec(),
        sigma2_u: x[2 + p],
        sigma2_v: x[3 + p],
    };
    (psi, split_xi(&x[4 + p..], m, n))
}

pub fn flatten_composite_grad(g: &gvacl::elbo::CompositeGradient) -> Vec<f64> {
    let mut x = vec![g.beta0_r, g.beta0_c];
    x.extend_from_slice(&g.slopes);
    x.extend([g.sigma2_u, g.sigma2_v]);
    x.extend(g.mu_u.iter().chain(&g.lam_u).chain(&g.mu_v).chain(&g.lam_v));
    x
}
