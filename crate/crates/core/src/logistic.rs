//! Experimental composite fit for binary responses.
//!
//! The row and column blocks need `E log(1 + exp(L + √λ Z))`, which has no
//! closed form; it is evaluated by Gauss–Hermite quadrature. The intercept
//! and slope are then rescaled by the conjectured factor
//! `1 - 0.1 (σ²_u + σ²_v)`, so the output is tagged experimental.

use std::time::Instant;

use crate::data::Dataset;
use crate::elbo::penalty;
use crate::error::{Error, Result};
use crate::family::{sigmoid, softplus, Family};
use crate::fit::{FitConfig, FitResult, Method, Scheme};
use crate::init::initialize;
use crate::lbfgs::{minimize, LbfgsSettings, Objective, StopReason};
use crate::params::{CompositeParams, ModelParams, VariationalParams};
use crate::quadrature::{gauss_hermite, QuadRule};

pub const DEFAULT_NODES: usize = 15;
pub const EXPERIMENTAL_TAG: &str = "conjectured correction";

/// `(E softplus(L + √λ Z), E σ(L + √λ Z), ½ E σ'(L + √λ Z))`: the value and
/// its partials in `L` and `λ`.
fn softplus_moments(lin: f64, lam: f64, rule: &QuadRule) -> (f64, f64, f64) {
    let s = lam.sqrt();
    let (mut v, mut d1, mut d2) = (0.0, 0.0, 0.0);
    for (&z, &w) in rule.nodes().iter().zip(rule.weights()) {
        let t = lin + s * z;
        let p = sigmoid(t);
        v += w * softplus(t);
        d1 += w * p;
        d2 += w * p * (1.0 - p);
    }
    (v, d1, 0.5 * d2)
}

/// Composite lower bound for binary data, with constants dropped, and its
/// gradient on the optimizer scale.
struct LogisticComposite<'a> {
    data: &'a Dataset,
    rule: QuadRule,
}

impl LogisticComposite<'_> {
    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let (m, n, p) = (self.data.m(), self.data.n(), self.data.p());
        let q = p + 2;
        let (b_r, b_c) = (x[0], x[1]);
        let slopes = &x[2..q];
        let (s2u, s2v) = (x[q].exp(), x[q + 1].exp());
        let off = q + 2;
        let mu_u = &x[off..off + m];
        let lam_u: Vec<f64> = x[off + m..off + 2 * m].iter().map(|v| v.exp()).collect();
        let mu_v = &x[off + 2 * m..off + 2 * m + n];
        let lam_v: Vec<f64> = x[off + 2 * m + n..].iter().map(|v| v.exp()).collect();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let eta0 = self.data.slope_predictor(slopes);
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..n {
                let idx = i * n + j;
                let y = self.data.response(i, j);
                let lr = b_r + eta0[idx] + mu_u[i];
                let lc = b_c + eta0[idx] + mu_v[j];
                let (vr, dr, hr) = softplus_moments(lr, lam_u[i], &self.rule);
                let (vc, dc, hc) = softplus_moments(lc, lam_v[j], &self.rule);
                total += y * (lr + lc) - vr - vc;
                let (gr, gc) = (y - dr, y - dc);
                grad[0] += gr;
                grad[1] += gc;
                for (g, xk) in grad[2..q].iter_mut().zip(self.data.covariates(i, j)) {
                    *g += (gr + gc) * xk;
                }
                grad[off + i] += gr;
                grad[off + m + i] -= hr;
                grad[off + 2 * m + j] += gc;
                grad[off + 2 * m + n + j] -= hc;
            }
        }
        for (side, (mus, lams, s2)) in [(mu_u, &lam_u, s2u), (mu_v, &lam_v, s2v)].into_iter().enumerate() {
            let (base, k) = if side == 0 { (off, m) } else { (off + 2 * m, n) };
            for e in 0..k {
                let (v, dmu, dlam, ds2) = penalty(mus[e], lams[e], s2);
                total += v;
                grad[base + e] += dmu;
                grad[base + k + e] += dlam;
                grad[q + side] += ds2;
            }
        }
        // Chain rule to log scale, then negate for minimization.
        grad[q] *= s2u;
        grad[q + 1] *= s2v;
        for e in 0..m {
            grad[off + m + e] *= lam_u[e];
        }
        for e in 0..n {
            grad[off + 2 * m + n + e] *= lam_v[e];
        }
        grad.iter_mut().for_each(|g| *g = -*g);
        -total
    }
}

impl Objective for LogisticComposite<'_> {
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        Ok(self.value_grad(x, grad))
    }
}

/// Apply the conjectured intercept and slope correction to raw composite
/// estimates.
pub fn conjectured_correction(raw: &CompositeParams) -> Result<ModelParams> {
    let denominator = 1.0 - 0.1 * (raw.sigma2_u + raw.sigma2_v);
    if !(denominator > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "correction denominator 1 - 0.1(σ²_u + σ²_v) = {denominator} is not positive"
        )));
    }
    let mut beta = vec![(raw.beta0_r + raw.beta0_c) / (2.0 * denominator)];
    beta.extend(raw.slopes.iter().map(|b| b / denominator));
    Ok(ModelParams {
        beta,
        sigma2_u: raw.sigma2_u,
        sigma2_v: raw.sigma2_v,
    })
}

/// Composite variational fit for binary data with `nodes`-point quadrature,
/// followed by the conjectured correction.
pub fn fit_logistic_experimental(data: &Dataset, config: &FitConfig, nodes: usize) -> Result<FitResult> {
    let started = Instant::now();
    if data.family() != Family::LogisticExperimental {
        return Err(Error::UnsupportedFamily(data.family().name()));
    }
    if data.m() < 2 || data.n() < 2 {
        return Err(Error::DegenerateGrid {
            m: data.m(),
            n: data.n(),
        });
    }
    let (m, n, p) = (data.m(), data.n(), data.p());
    let q = p + 2;
    let start = initialize(data, config.init, config.seed);
    let c0 = start.composite();
    let floor_ln = config.sigma2_floor.ln();
    let mut x0 = vec![c0.beta0_r, c0.beta0_c];
    x0.extend_from_slice(&c0.slopes);
    x0.push(c0.sigma2_u.max(config.sigma2_floor).ln());
    x0.push(c0.sigma2_v.max(config.sigma2_floor).ln());
    x0.extend_from_slice(&start.xi.mu_u);
    x0.extend(start.xi.lam_u.iter().map(|l| l.ln()));
    x0.extend_from_slice(&start.xi.mu_v);
    x0.extend(start.xi.lam_v.iter().map(|l| l.ln()));
    let mut lower = vec![f64::NEG_INFINITY; x0.len()];
    lower[q] = floor_ln;
    lower[q + 1] = floor_ln;
    let mut obj = LogisticComposite {
        data,
        rule: gauss_hermite(nodes)?,
    };
    let settings = LbfgsSettings {
        memory: config.memory,
        max_iters: config.max_iters,
        rel_tol: config.rel_tol,
        grad_tol: config.grad_tol,
        ..Default::default()
    };
    let report = minimize(&mut obj, &x0, &lower, &settings)?;
    let x = &report.x;
    let raw = CompositeParams {
        beta0_r: x[0],
        beta0_c: x[1],
        slopes: x[2..q].to_vec(),
        sigma2_u: x[q].exp(),
        sigma2_v: x[q + 1].exp(),
    };
    let off = q + 2;
    let xi_hat = VariationalParams {
        mu_u: x[off..off + m].to_vec(),
        lam_u: x[off + m..off + 2 * m].iter().map(|v| v.exp()).collect(),
        mu_v: x[off + 2 * m..off + 2 * m + n].to_vec(),
        lam_v: x[off + 2 * m + n..].iter().map(|v| v.exp()).collect(),
    };
    let estimates = conjectured_correction(&raw)?;
    let on_floor = |s: f64| s <= config.sigma2_floor * (1.0 + 1e-9);
    Ok(FitResult {
        method: Method::Gvacl,
        family: data.family(),
        boundary: on_floor(raw.sigma2_u) || on_floor(raw.sigma2_v),
        estimates,
        raw_composite: Some(raw),
        xi_hat,
        elbo_trace: report.trace.iter().map(|v| -v).collect(),
        converged: report.converged(),
        iters: report.iters,
        wall_time: started.elapsed().as_secs_f64(),
        stop: report.stop,
        scheme: Scheme::Joint,
        grad_max_norm: report.projected_grad_norm,
        init_fallback: start.fell_back,
        experimental: Some(EXPERIMENTAL_TAG.to_string()),
    })
    .map(|r| {
        if r.stop == StopReason::LineSearchFailed {
            log::warn!("logistic fit stopped on a failed line search");
        }
        r
    })
}
