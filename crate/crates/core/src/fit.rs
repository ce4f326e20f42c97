//! Maximization of the full and composite lower bounds over `(Ψ, ξ)`.
//!
//! Parameters are optimized on an unconstrained scale: `log σ²` and `log λ`
//! replace the variances, and `log σ²` is bounded below by `log(floor)`.
//! Three schemes share the L-BFGS core:
//!
//! * `Joint`: one L-BFGS run over every parameter.
//! * `Profiled`: L-BFGS over `Ψ` only, with `ξ` maximized inside each
//!   evaluation. Every `(μ, λ)` pair solves a concave two-parameter problem.
//!   For the composite bound these problems are independent; for the full
//!   bound they are coupled and solved by alternating row / column sweeps.
//! * `BlockCoordinate`: exact `ξ`-step, then an L-BFGS `Ψ`-step with `ξ`
//!   held fixed, repeated. Slow; kept for debugging.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::elbo::{composite_elbo_grad, full_elbo_grad, penalty};
use crate::error::{Block, Error, Result};
use crate::family::{CellKernel, Family, EXP_CAP};
use crate::inference::recover_intercept;
use crate::init::{initialize, InitStrategy};
use crate::lbfgs::{minimize, LbfgsSettings, Objective, StopReason};
use crate::params::{CompositeParams, ModelParams, VariationalParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Gaussian variational approximation to the full likelihood.
    FullGva,
    /// Gaussian variational approximation to the row-column composite likelihood.
    Gvacl,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::FullGva => "gva",
            Method::Gvacl => "gvacl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// `Profiled` for both objectives.
    Auto,
    Joint,
    Profiled,
    BlockCoordinate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub method: Method,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub grad_tol: f64,
    pub init: InitStrategy,
    pub seed: u64,
    pub scheme: Scheme,
    /// Lower bound on `σ²_u`, `σ²_v`.
    pub sigma2_floor: f64,
    pub memory: usize,
}

impl FitConfig {
    pub fn new(method: Method) -> Self {
        FitConfig {
            method,
            max_iters: 500,
            rel_tol: 1e-8,
            grad_tol: 1e-6,
            init: InitStrategy::Moments,
            seed: 0,
            scheme: Scheme::Auto,
            sigma2_floor: 1e-6,
            memory: 10,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.grad_tol > 0.0) {
            return Err(Error::InvalidParameter("rel_tol and grad_tol must be positive".into()));
        }
        if !(self.sigma2_floor > 0.0) || self.max_iters == 0 || self.memory == 0 {
            return Err(Error::InvalidParameter(
                "sigma2_floor, max_iters and memory must be positive".into(),
            ));
        }
        Ok(())
    }

    fn resolved_scheme(&self) -> Scheme {
        match self.scheme {
            Scheme::Auto => Scheme::Profiled,
            other => other,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub method: Method,
    pub family: Family,
    /// Model-scale estimates; for `Gvacl` the intercept is recovered from
    /// the row and column intercepts.
    pub estimates: ModelParams,
    pub raw_composite: Option<CompositeParams>,
    pub xi_hat: VariationalParams,
    /// Objective value at the start and after every accepted iteration.
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
    pub iters: usize,
    pub wall_time: f64,
    pub stop: StopReason,
    pub scheme: Scheme,
    /// Max-norm of the gradient over all parameters on the optimizer scale.
    pub grad_max_norm: f64,
    /// A variance component ended on the floor.
    pub boundary: bool,
    pub init_fallback: bool,
    /// Set for fits whose estimates rest on a conjectured correction.
    pub experimental: Option<String>,
}

impl FitResult {
    pub fn elbo_final(&self) -> f64 {
        *self.elbo_trace.last().expect("trace holds the starting value")
    }
}

/// Number of fixed-effect slots on the optimizer scale.
fn fixed_len(method: Method, p: usize) -> usize {
    match method {
        Method::FullGva => p + 1,
        Method::Gvacl => p + 2,
    }
}

/// Unconstrained optimizer coordinates for `Ψ`: fixed effects then `log σ²`.
fn pack_psi(method: Method, model: &ModelParams, composite: &CompositeParams) -> Vec<f64> {
    let mut x = match method {
        Method::FullGva => model.beta.clone(),
        Method::Gvacl => {
            let mut v = vec![composite.beta0_r, composite.beta0_c];
            v.extend_from_slice(&composite.slopes);
            v
        }
    };
    x.push(model.sigma2_u.ln());
    x.push(model.sigma2_v.ln());
    x
}

fn pack_xi(xi: &VariationalParams, out: &mut Vec<f64>) {
    out.extend_from_slice(&xi.mu_u);
    out.extend(xi.lam_u.iter().map(|l| l.ln()));
    out.extend_from_slice(&xi.mu_v);
    out.extend(xi.lam_v.iter().map(|l| l.ln()));
}

fn unpack_xi(x: &[f64], m: usize, n: usize) -> VariationalParams {
    VariationalParams {
        mu_u: x[..m].to_vec(),
        lam_u: x[m..2 * m].iter().map(|v| v.exp()).collect(),
        mu_v: x[2 * m..2 * m + n].to_vec(),
        lam_v: x[2 * m + n..2 * m + 2 * n].iter().map(|v| v.exp()).collect(),
    }
}

#[derive(Debug, Clone)]
enum Psi {
    Full(ModelParams),
    Composite(CompositeParams),
}

fn unpack_psi(method: Method, x: &[f64]) -> Psi {
    let q = x.len() - 2;
    let (s2u, s2v) = (x[q].exp(), x[q + 1].exp());
    match method {
        Method::FullGva => Psi::Full(ModelParams {
            beta: x[..q].to_vec(),
            sigma2_u: s2u,
            sigma2_v: s2v,
        }),
        Method::Gvacl => Psi::Composite(CompositeParams {
            beta0_r: x[0],
            beta0_c: x[1],
            slopes: x[2..q].to_vec(),
            sigma2_u: s2u,
            sigma2_v: s2v,
        }),
    }
}

/// Negative bound and its gradient on the log scale, laid out as
/// `[fixed.., log σ²_u, log σ²_v, μ_u, log λ_u, μ_v, log λ_v]`.
fn joint_negative(data: &Dataset, method: Method, x: &[f64], grad: &mut [f64]) -> Result<f64> {
    let (m, n) = (data.m(), data.n());
    let q = fixed_len(method, data.p());
    let psi = unpack_psi(method, &x[..q + 2]);
    let xi = unpack_xi(&x[q + 2..], m, n);
    let mut flat = Vec::with_capacity(x.len());
    let value = match &psi {
        Psi::Full(p) => {
            let g = full_elbo_grad(p, &xi, data)?.log_scale(p, &xi);
            flat.extend_from_slice(&g.beta);
            flat.extend([g.sigma2_u, g.sigma2_v]);
            flat.extend(g.mu_u.iter().chain(&g.lam_u).chain(&g.mu_v).chain(&g.lam_v));
            g.value
        }
        Psi::Composite(p) => {
            let g = composite_elbo_grad(p, &xi, data)?.log_scale(p, &xi);
            flat.extend([g.beta0_r, g.beta0_c]);
            flat.extend_from_slice(&g.slopes);
            flat.extend([g.sigma2_u, g.sigma2_v]);
            flat.extend(g.mu_u.iter().chain(&g.lam_u).chain(&g.mu_v).chain(&g.lam_v));
            g.value
        }
    };
    for (o, v) in grad.iter_mut().zip(flat) {
        *o = -v;
    }
    Ok(-value)
}

struct JointObjective<'a> {
    data: &'a Dataset,
    method: Method,
}

impl Objective for JointObjective<'_> {
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        joint_negative(self.data, self.method, x, grad)
    }
}

/// `Ψ`-only objective with `ξ` frozen (block-coordinate `Ψ`-step).
struct FrozenXiObjective<'a> {
    data: &'a Dataset,
    method: Method,
    xi_part: Vec<f64>,
    scratch: Vec<f64>,
}

impl Objective for FrozenXiObjective<'_> {
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        let mut full = x.to_vec();
        full.extend_from_slice(&self.xi_part);
        self.scratch.resize(full.len(), 0.0);
        let v = joint_negative(self.data, self.method, &full, &mut self.scratch)?;
        grad.copy_from_slice(&self.scratch[..x.len()]);
        Ok(v)
    }
}

/// Maximizes `w [A μ - exp(ln C + κ μ + λ/2)] + ½ {log λ - (μ² + λ)/σ²}`
/// over `(μ, λ)`, the bound restricted to a single random effect. The
/// problem is jointly concave; Newton's method with step halving.
pub(crate) fn solve_effect(
    a: f64,
    ln_c: f64,
    kappa: f64,
    weight: f64,
    s2: f64,
    start: (f64, f64),
) -> Result<(f64, f64)> {
    let objective = |mu: f64, lam: f64| -> f64 {
        let ex = ln_c + kappa * mu + 0.5 * lam;
        if ex > EXP_CAP || lam <= 0.0 {
            return f64::NEG_INFINITY;
        }
        weight * (a * mu - ex.exp()) + 0.5 * ((lam / s2).ln() - (mu * mu + lam) / s2)
    };
    let (mut mu, mut lam) = if start.1 > 0.0 && start.0.is_finite() && objective(start.0, start.1).is_finite() {
        start
    } else {
        (0.0, s2.min(1.0))
    };
    let mut current = objective(mu, lam);
    if !current.is_finite() {
        // Pull μ towards the region where the exponent is representable.
        mu = -kappa * (ln_c + 0.5 * lam).max(0.0);
        current = objective(mu, lam);
        if !current.is_finite() {
            return Err(Error::Overflow {
                block: Block::LinearPredictor,
                exponent: ln_c + kappa * mu + 0.5 * lam,
            });
        }
    }
    for _ in 0..200 {
        let e = (ln_c + kappa * mu + 0.5 * lam).exp();
        let we = weight * e;
        let g_mu = weight * a - kappa * we - mu / s2;
        let g_lam = -0.5 * we + 0.5 / lam - 0.5 / s2;
        let h_mm = -we - 1.0 / s2;
        let h_ml = -0.5 * kappa * we;
        let h_ll = -0.25 * we - 0.5 / (lam * lam);
        let det = h_mm * h_ll - h_ml * h_ml;
        let d_mu = -(h_ll * g_mu - h_ml * g_lam) / det;
        let d_lam = -(h_mm * g_lam - h_ml * g_mu) / det;
        let mut t = 1.0;
        while lam + t * d_lam <= 0.1 * lam {
            t *= 0.5;
        }
        let decrement = g_mu * d_mu + g_lam * d_lam;
        let mut moved = false;
        for _ in 0..60 {
            let (nm, nl) = (mu + t * d_mu, lam + t * d_lam);
            let cand = objective(nm, nl);
            if cand >= current + 1e-4 * t * decrement - 1e-15 * current.abs() {
                mu = nm;
                lam = nl;
                current = cand;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        let small = (t * d_mu).abs() <= 1e-13 * (1.0 + mu.abs()) && (t * d_lam).abs() <= 1e-13 * lam;
        if !moved || small {
            break;
        }
    }
    Ok((mu, lam))
}

/// Profiled objective: `-max_ξ bound(Ψ, ξ)` as a function of `Ψ` alone.
struct ProfiledObjective<'a> {
    data: &'a Dataset,
    method: Method,
    kappa: f64,
    weight: f64,
    /// Per-cell `c_ij`.
    c: Vec<f64>,
    /// Row and column sums of `a_ij`.
    a_rows: Vec<f64>,
    a_cols: Vec<f64>,
    /// `Σ_ij a_ij x_ijk`.
    ax: Vec<f64>,
    /// Per-cell `c_ij exp(κ xᵀslopes)`, refreshed each evaluation.
    ec: Vec<f64>,
    xi: VariationalParams,
    sweep_tol: f64,
    max_sweeps: usize,
}

impl<'a> ProfiledObjective<'a> {
    fn new(data: &'a Dataset, method: Method, xi: VariationalParams) -> Self {
        let (m, n, p) = (data.m(), data.n(), data.p());
        let family = data.family();
        let mut c = Vec::with_capacity(m * n);
        let mut a_rows = vec![0.0; m];
        let mut a_cols = vec![0.0; n];
        let mut ax = vec![0.0; p];
        let mut kappa = 1.0;
        for i in 0..m {
            for j in 0..n {
                let k = CellKernel::new(family, data.response(i, j));
                kappa = k.kappa;
                c.push(k.c);
                a_rows[i] += k.a;
                a_cols[j] += k.a;
                for (acc, x) in ax.iter_mut().zip(data.covariates(i, j)) {
                    *acc += k.a * x;
                }
            }
        }
        ProfiledObjective {
            data,
            method,
            kappa,
            weight: family.data_weight(),
            c,
            a_rows,
            a_cols,
            ax,
            ec: vec![0.0; m * n],
            xi,
            sweep_tol: 1e-12,
            max_sweeps: 500,
        }
    }

    fn refresh_cells(&mut self, slopes: &[f64]) -> Result<()> {
        let eta = self.data.slope_predictor(slopes);
        for ((ec, &c), &e) in self.ec.iter_mut().zip(&self.c).zip(&eta) {
            let ex = self.kappa * e;
            if ex > EXP_CAP {
                return Err(Error::Overflow {
                    block: Block::FixedEffects,
                    exponent: ex,
                });
            }
            *ec = c * ex.exp();
        }
        Ok(())
    }

    fn effect_factors(&self, mus: &[f64], lams: &[f64], shift: f64) -> Result<Vec<f64>> {
        mus.iter()
            .zip(lams)
            .map(|(&mu, &lam)| {
                let ex = shift + self.kappa * mu + 0.5 * lam;
                if ex > EXP_CAP {
                    Err(Error::Overflow {
                        block: Block::LinearPredictor,
                        exponent: ex,
                    })
                } else {
                    Ok(ex.exp())
                }
            })
            .collect()
    }

    fn solve_side(
        &self,
        a: &[f64],
        sums: &[f64],
        shift: f64,
        s2: f64,
        mus: &mut [f64],
        lams: &mut [f64],
        block: Block,
    ) -> Result<f64> {
        let mut change = 0.0f64;
        for k in 0..a.len() {
            if !(sums[k] > 0.0 && sums[k].is_finite()) {
                return Err(Error::Overflow {
                    block,
                    exponent: f64::INFINITY,
                });
            }
            let (mu, lam) = solve_effect(a[k], shift + sums[k].ln(), self.kappa, self.weight, s2, (mus[k], lams[k]))
                .map_err(|_| Error::Overflow {
                    block,
                    exponent: f64::INFINITY,
                })?;
            change = change.max((mu - mus[k]).abs()).max((lam - lams[k]).abs());
            mus[k] = mu;
            lams[k] = lam;
        }
        Ok(change)
    }

    fn penalty_side(mus: &[f64], lams: &[f64], s2: f64) -> (f64, f64) {
        let mut value = 0.0;
        let mut d_s2 = 0.0;
        for (&mu, &lam) in mus.iter().zip(lams) {
            let (v, _, _, ds) = penalty(mu, lam, s2);
            value += v;
            d_s2 += ds;
        }
        (value, d_s2)
    }

    /// Maximize over `ξ` at `x`; returns the negative bound, gradient into `grad`.
    fn profile(&mut self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        let (m, n, p) = (self.data.m(), self.data.n(), self.data.p());
        let q = x.len() - 2;
        let (s2u, s2v) = (x[q].exp(), x[q + 1].exp());
        let slopes = &x[q - p..q];
        self.refresh_cells(slopes)?;
        let kappa = self.kappa;
        let w = self.weight;
        let mut xi = std::mem::take(&mut self.xi);
        let result = (|| -> Result<f64> {
            let slope_dot_ax: f64 = slopes.iter().zip(&self.ax).map(|(s, a)| s * a).sum();
            let mut g_slopes = vec![0.0; p];
            let (value, g_fixed_head) = match self.method {
                Method::Gvacl => {
                    let (b_r, b_c) = (x[0], x[1]);
                    let row_sums: Vec<f64> = self.ec.chunks_exact(n).map(|r| r.iter().sum()).collect();
                    let mut col_sums = vec![0.0; n];
                    for row in self.ec.chunks_exact(n) {
                        for (cs, v) in col_sums.iter_mut().zip(row) {
                            *cs += v;
                        }
                    }
                    self.solve_side(&self.a_rows, &row_sums, kappa * b_r, s2u, &mut xi.mu_u, &mut xi.lam_u, Block::RowEffects)?;
                    self.solve_side(&self.a_cols, &col_sums, kappa * b_c, s2v, &mut xi.mu_v, &mut xi.lam_v, Block::ColumnEffects)?;
                    let rf = self.effect_factors(&xi.mu_u, &xi.lam_u, kappa * b_r)?;
                    let cf = self.effect_factors(&xi.mu_v, &xi.lam_v, kappa * b_c)?;
                    let e_rows: f64 = rf.iter().zip(&row_sums).map(|(a, b)| a * b).sum();
                    let e_cols: f64 = cf.iter().zip(&col_sums).map(|(a, b)| a * b).sum();
                    let a_total: f64 = self.a_rows.iter().sum();
                    let a_mu_rows: f64 = self.a_rows.iter().zip(&xi.mu_u).map(|(a, b)| a * b).sum();
                    let a_mu_cols: f64 = self.a_cols.iter().zip(&xi.mu_v).map(|(a, b)| a * b).sum();
                    let cells = w
                        * ((b_r + b_c) * a_total + 2.0 * slope_dot_ax + a_mu_rows + a_mu_cols - e_rows - e_cols);
                    if p > 0 {
                        for i in 0..m {
                            for j in 0..n {
                                let idx = i * n + j;
                                let e = self.ec[idx] * (rf[i] + cf[j]);
                                for (g, xk) in g_slopes.iter_mut().zip(self.data.covariates(i, j)) {
                                    *g += e * xk;
                                }
                            }
                        }
                        for (g, a) in g_slopes.iter_mut().zip(&self.ax) {
                            *g = w * (2.0 * a - kappa * *g);
                        }
                    }
                    let head = vec![w * (a_total - kappa * e_rows), w * (a_total - kappa * e_cols)];
                    (cells, head)
                }
                Method::FullGva => {
                    let b0 = x[0];
                    let mut cf = self.effect_factors(&xi.mu_v, &xi.lam_v, 0.0)?;
                    let mut rf;
                    let mut sweeps = 0;
                    let mut last_step = f64::INFINITY;
                    loop {
                        let row_sums: Vec<f64> = self
                            .ec
                            .chunks_exact(n)
                            .map(|r| r.iter().zip(&cf).map(|(a, b)| a * b).sum())
                            .collect();
                        let d_rows = self.solve_side(&self.a_rows, &row_sums, kappa * b0, s2u, &mut xi.mu_u, &mut xi.lam_u, Block::RowEffects)?;
                        rf = self.effect_factors(&xi.mu_u, &xi.lam_u, 0.0)?;
                        let mut col_sums = vec![0.0; n];
                        for (row, r) in self.ec.chunks_exact(n).zip(&rf) {
                            for (cs, v) in col_sums.iter_mut().zip(row) {
                                *cs += v * r;
                            }
                        }
                        let d_cols = self.solve_side(&self.a_cols, &col_sums, kappa * b0, s2v, &mut xi.mu_v, &mut xi.lam_v, Block::ColumnEffects)?;
                        // Moving every μ_u up by c and every μ_v down by c leaves
                        // the cells unchanged; take the exact optimum along it.
                        let shift = (xi.mu_v.iter().sum::<f64>() / s2v - xi.mu_u.iter().sum::<f64>() / s2u)
                            / (m as f64 / s2u + n as f64 / s2v);
                        xi.mu_u.iter_mut().for_each(|v| *v += shift);
                        xi.mu_v.iter_mut().for_each(|v| *v -= shift);
                        rf = self.effect_factors(&xi.mu_u, &xi.lam_u, 0.0)?;
                        cf = self.effect_factors(&xi.mu_v, &xi.lam_v, 0.0)?;
                        sweeps += 1;
                        // Distance to the fixed point from the observed contraction rate.
                        let step = d_rows.max(d_cols).max(shift.abs());
                        let rate = if last_step.is_finite() { (step / last_step).min(0.99) } else { 0.99 };
                        last_step = step;
                        if step * rate / (1.0 - rate) <= self.sweep_tol || step == 0.0 || sweeps >= self.max_sweeps {
                            break;
                        }
                    }
                    let scale = (kappa * b0).exp();
                    let mut e_total = 0.0;
                    for i in 0..m {
                        for j in 0..n {
                            let idx = i * n + j;
                            let e = self.ec[idx] * rf[i] * cf[j];
                            e_total += e;
                            for (g, xk) in g_slopes.iter_mut().zip(self.data.covariates(i, j)) {
                                *g += e * xk;
                            }
                        }
                    }
                    e_total *= scale;
                    if !e_total.is_finite() {
                        return Err(Error::Overflow {
                            block: Block::LinearPredictor,
                            exponent: f64::INFINITY,
                        });
                    }
                    for (g, a) in g_slopes.iter_mut().zip(&self.ax) {
                        *g = w * (a - kappa * scale * *g);
                    }
                    let a_total: f64 = self.a_rows.iter().sum();
                    let a_mu_rows: f64 = self.a_rows.iter().zip(&xi.mu_u).map(|(a, b)| a * b).sum();
                    let a_mu_cols: f64 = self.a_cols.iter().zip(&xi.mu_v).map(|(a, b)| a * b).sum();
                    let cells = w * (b0 * a_total + slope_dot_ax + a_mu_rows + a_mu_cols - e_total);
                    (cells, vec![w * (a_total - kappa * e_total)])
                }
            };
            let (pen_u, ds_u) = Self::penalty_side(&xi.mu_u, &xi.lam_u, s2u);
            let (pen_v, ds_v) = Self::penalty_side(&xi.mu_v, &xi.lam_v, s2v);
            let total = value + pen_u + pen_v;
            let head_len = g_fixed_head.len();
            for (k, g) in g_fixed_head.into_iter().enumerate() {
                grad[k] = -g;
            }
            for (k, g) in g_slopes.into_iter().enumerate() {
                grad[head_len + k] = -g;
            }
            grad[q] = -ds_u * s2u;
            grad[q + 1] = -ds_v * s2v;
            if !total.is_finite() {
                return Err(Error::Overflow {
                    block: Block::LinearPredictor,
                    exponent: f64::INFINITY,
                });
            }
            Ok(-total)
        })();
        self.xi = xi;
        result
    }
}

impl Objective for ProfiledObjective<'_> {
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        let saved = self.xi.clone();
        let out = self.profile(x, grad);
        if out.is_err() {
            self.xi = saved;
        }
        out
    }
}

/// Fit the chosen variational objective.
pub fn fit(data: &Dataset, config: &FitConfig) -> Result<FitResult> {
    let started = Instant::now();
    config.validate()?;
    data.family().closed_form()?;
    if config.method == Method::Gvacl && (data.m() < 2 || data.n() < 2) {
        return Err(Error::DegenerateGrid {
            m: data.m(),
            n: data.n(),
        });
    }
    let (m, n, p) = (data.m(), data.n(), data.p());
    let method = config.method;
    let start = initialize(data, config.init, config.seed);
    let floor_ln = config.sigma2_floor.ln();
    let mut model0 = start.model.clone();
    model0.sigma2_u = model0.sigma2_u.max(config.sigma2_floor);
    model0.sigma2_v = model0.sigma2_v.max(config.sigma2_floor);
    let composite0 = CompositeParams {
        sigma2_u: model0.sigma2_u,
        sigma2_v: model0.sigma2_v,
        ..start.composite()
    };
    let psi0 = pack_psi(method, &model0, &composite0);
    let q = fixed_len(method, p);
    let outer_lower: Vec<f64> = (0..q + 2)
        .map(|k| if k >= q { floor_ln } else { f64::NEG_INFINITY })
        .collect();
    let settings = LbfgsSettings {
        memory: config.memory,
        max_iters: config.max_iters,
        rel_tol: config.rel_tol,
        grad_tol: config.grad_tol,
        ..Default::default()
    };
    let scheme = config.resolved_scheme();
    let diverged = |e: Error| match e {
        Error::Overflow { block, .. } => Error::Divergence { block },
        other => other,
    };

    let (final_x, trace, iters, stop) = match scheme {
        Scheme::Joint | Scheme::Auto => {
            let mut x0 = psi0.clone();
            pack_xi(&start.xi, &mut x0);
            let mut lower = outer_lower.clone();
            lower.resize(x0.len(), f64::NEG_INFINITY);
            let mut obj = JointObjective { data, method };
            let report = minimize(&mut obj, &x0, &lower, &settings).map_err(diverged)?;
            (report.x, report.trace, report.iters, report.stop)
        }
        Scheme::Profiled => {
            let mut obj = ProfiledObjective::new(data, method, start.xi.clone());
            let report = minimize(&mut obj, &psi0, &outer_lower, &settings).map_err(diverged)?;
            let mut scratch = vec![0.0; report.x.len()];
            obj.evaluate(&report.x, &mut scratch).map_err(diverged)?;
            let mut x = report.x.clone();
            pack_xi(&obj.xi, &mut x);
            (x, report.trace, report.iters, report.stop)
        }
        Scheme::BlockCoordinate => {
            let mut inner = ProfiledObjective::new(data, method, start.xi.clone());
            let mut psi = psi0.clone();
            let mut scratch = vec![0.0; psi.len()];
            let mut trace = Vec::new();
            let mut stop = StopReason::MaxIterations;
            let mut iters = 0;
            let inner_settings = LbfgsSettings {
                max_iters: 50,
                ..settings.clone()
            };
            // ξ-step at the starting Ψ.
            trace.push(inner.evaluate(&psi, &mut scratch).map_err(diverged)?);
            while iters < config.max_iters {
                let mut xi_part = Vec::new();
                pack_xi(&inner.xi, &mut xi_part);
                let mut frozen = FrozenXiObjective {
                    data,
                    method,
                    xi_part,
                    scratch: Vec::new(),
                };
                let step = minimize(&mut frozen, &psi, &outer_lower, &inner_settings).map_err(diverged)?;
                psi = step.x;
                let f = inner.evaluate(&psi, &mut scratch).map_err(diverged)?;
                iters += 1;
                let prev = *trace.last().expect("nonempty");
                trace.push(f.min(prev));
                let grad_norm = scratch
                    .iter()
                    .zip(&psi)
                    .zip(&outer_lower)
                    .map(|((g, x), lo)| if x <= lo && *g > 0.0 { 0.0 } else { g.abs() })
                    .fold(0.0, f64::max);
                if grad_norm <= config.grad_tol {
                    stop = StopReason::GradientTolerance;
                    break;
                }
                if (prev - f).abs() <= config.rel_tol * f.abs().max(1.0) {
                    stop = StopReason::RelativeChange;
                    break;
                }
            }
            let mut x = psi;
            pack_xi(&inner.xi, &mut x);
            (x, trace, iters, stop)
        }
    };

    let psi = unpack_psi(method, &final_x[..q + 2]);
    let xi_hat = unpack_xi(&final_x[q + 2..], m, n);
    let mut grad = vec![0.0; final_x.len()];
    joint_negative(data, method, &final_x, &mut grad).map_err(diverged)?;
    let grad_max_norm = grad
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let at_floor = (k == q || k == q + 1) && final_x[k] <= floor_ln;
            if at_floor && *g > 0.0 {
                0.0
            } else {
                g.abs()
            }
        })
        .fold(0.0, f64::max);
    let (estimates, raw_composite) = match psi {
        Psi::Full(model) => (model, None),
        Psi::Composite(c) => {
            let mut beta = vec![recover_intercept(c.beta0_r, c.beta0_c, c.sigma2_u, c.sigma2_v)];
            beta.extend_from_slice(&c.slopes);
            (
                ModelParams {
                    beta,
                    sigma2_u: c.sigma2_u,
                    sigma2_v: c.sigma2_v,
                },
                Some(c),
            )
        }
    };
    let on_floor = |s: f64| s <= config.sigma2_floor * (1.0 + 1e-9);
    let boundary = on_floor(estimates.sigma2_u) || on_floor(estimates.sigma2_v);
    Ok(FitResult {
        method,
        family: data.family(),
        estimates,
        raw_composite,
        xi_hat,
        elbo_trace: trace.into_iter().map(|v| -v).collect(),
        converged: matches!(stop, StopReason::GradientTolerance | StopReason::RelativeChange),
        iters,
        wall_time: started.elapsed().as_secs_f64(),
        stop,
        scheme,
        grad_max_norm,
        boundary,
        init_fallback: start.fell_back,
        experimental: None,
    })
}
