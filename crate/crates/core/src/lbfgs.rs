//! Limited-memory BFGS minimizer with lower bounds on selected coordinates
//! and Armijo backtracking.
//!
//! Bounded coordinates use a simple active-set rule: a coordinate sitting on
//! its bound whose gradient points outward is frozen for the step. Trial
//! points that overflow are treated as `+∞` and trigger backtracking.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Something to minimize.
pub trait Objective {
    /// Value at `x`; writes the gradient into `grad`.
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> Result<f64>;
}

#[derive(Debug, Clone)]
pub struct LbfgsSettings {
    pub memory: usize,
    pub max_iters: usize,
    /// Stop when `|Δf| ≤ rel_tol · max(|f|, 1)` on `patience` consecutive
    /// accepted steps.
    pub rel_tol: f64,
    pub patience: usize,
    /// Stop when the projected gradient max-norm is at most this.
    pub grad_tol: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsSettings {
    fn default() -> Self {
        LbfgsSettings {
            memory: 10,
            max_iters: 500,
            rel_tol: 1e-8,
            patience: 3,
            grad_tol: 1e-6,
            armijo: 1e-4,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    RelativeChange,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsReport {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    /// Objective value at the start and after every accepted step.
    pub trace: Vec<f64>,
    pub iters: usize,
    pub stop: StopReason,
    pub projected_grad_norm: f64,
}

impl LbfgsReport {
    pub fn converged(&self) -> bool {
        matches!(self.stop, StopReason::GradientTolerance | StopReason::RelativeChange)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn projected_gradient(x: &[f64], g: &[f64], lower: &[f64], out: &mut [f64]) {
    for k in 0..x.len() {
        out[k] = if x[k] <= lower[k] && g[k] > 0.0 { 0.0 } else { g[k] };
    }
}

/// Minimize `objective` from `x0`. `lower` holds a lower bound per
/// coordinate (`-∞` when free).
pub fn minimize<O: Objective>(
    objective: &mut O,
    x0: &[f64],
    lower: &[f64],
    settings: &LbfgsSettings,
) -> Result<LbfgsReport> {
    let dim = x0.len();
    assert_eq!(lower.len(), dim);
    let mut x: Vec<f64> = x0.iter().zip(lower).map(|(v, lo)| v.max(*lo)).collect();
    let mut g = vec![0.0; dim];
    let mut f = objective.evaluate(&x, &mut g)?;
    if !f.is_finite() {
        return Err(Error::InvalidParameter("objective is not finite at the starting point".into()));
    }
    let mut trace = vec![f];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(settings.memory);
    let mut pg = vec![0.0; dim];
    let mut x_trial = vec![0.0; dim];
    let mut g_trial = vec![0.0; dim];
    let mut iters = 0;
    let mut stop = StopReason::MaxIterations;
    let mut quiet = 0;

    while iters < settings.max_iters {
        projected_gradient(&x, &g, lower, &mut pg);
        let pg_norm = pg.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if pg_norm <= settings.grad_tol {
            stop = StopReason::GradientTolerance;
            break;
        }
        let mut dir = two_loop(&pg, &history);
        for k in 0..dim {
            if pg[k] == 0.0 && x[k] <= lower[k] {
                dir[k] = 0.0;
            }
        }
        if dot(&dir, &pg) >= 0.0 || dir.iter().any(|v| !v.is_finite()) {
            history.clear();
            dir = pg.iter().map(|v| -v).collect();
        }
        let mut step = if history.is_empty() {
            (1.0 / pg_norm).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..settings.max_backtracks {
            for k in 0..dim {
                x_trial[k] = (x[k] + step * dir[k]).max(lower[k]);
            }
            match objective.evaluate(&x_trial, &mut g_trial) {
                Ok(ft) if ft.is_finite() => {
                    let moved: f64 = (0..dim).map(|k| g[k] * (x_trial[k] - x[k])).sum();
                    if ft <= f + settings.armijo * moved.min(0.0) && ft <= f {
                        accepted = Some(ft);
                        break;
                    }
                    // Near the optimum values agree to roundoff; fall back on
                    // the slope along the step (approximate Wolfe test).
                    let slope: f64 = (0..dim).map(|k| g_trial[k] * (x_trial[k] - x[k])).sum();
                    if moved < 0.0 && ft <= f + 4.0 * f64::EPSILON * f.abs() && slope <= -0.8 * moved && slope >= 0.9 * moved {
                        accepted = Some(ft);
                        break;
                    }
                }
                Ok(_) | Err(Error::Overflow { .. }) => {}
                Err(e) => return Err(e),
            }
            step *= 0.5;
        }

        let Some(f_new) = accepted else {
            if !history.is_empty() {
                history.clear();
                continue;
            }
            stop = StopReason::LineSearchFailed;
            break;
        };
        iters += 1;
        let s: Vec<f64> = x_trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_trial.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&yv, &yv).sqrt() && sy > 0.0 {
            if history.len() == settings.memory {
                history.pop_front();
            }
            history.push_back((s, yv, 1.0 / sy));
        }
        let change = (f - f_new).abs();
        std::mem::swap(&mut x, &mut x_trial);
        std::mem::swap(&mut g, &mut g_trial);
        f = f_new;
        trace.push(f);
        if change <= settings.rel_tol * f.abs().max(1.0) {
            quiet += 1;
            if quiet >= settings.patience.max(1) {
                stop = StopReason::RelativeChange;
                break;
            }
        } else {
            quiet = 0;
        }
    }

    projected_gradient(&x, &g, lower, &mut pg);
    let projected_grad_norm = pg.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if stop == StopReason::MaxIterations && projected_grad_norm <= settings.grad_tol {
        stop = StopReason::GradientTolerance;
    }
    Ok(LbfgsReport {
        x,
        value: f,
        grad: g,
        trace,
        iters,
        stop,
        projected_grad_norm,
    })
}

/// Two-loop recursion: returns `-H g`.
fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qk, yk) in q.iter_mut().zip(y) {
            *qk -= a * yk;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qk in q.iter_mut() {
            *qk *= gamma;
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qk, sk) in q.iter_mut().zip(s) {
            *qk += (a - b) * sk;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}
