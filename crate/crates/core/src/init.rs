//! Starting values for the variational fits.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::family::{sigmoid, Family};
use crate::params::{CompositeParams, ModelParams, VariationalParams};

/// Variance components from the moment start are floored here.
pub const MOMENT_FLOOR: f64 = 0.01;
/// and capped here; working residuals blow up where the fitted mean is tiny.
pub const MOMENT_CEILING: f64 = 10.0;
const FISHER_STEPS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitStrategy {
    /// No-random-effect GLM for `β`, variance of row / column means of the
    /// working residuals for `σ²` (clamped to `[0.01, 10]`), `μ = 0`, `λ = σ²`.
    Moments,
    /// `β = 0`, `σ² = 1`, `μ = 0`, `λ = 1`.
    Zeros,
    /// Moment start with seeded `N(0, sd²)` noise on `β` and every `μ`.
    Jittered { sd: f64 },
}

#[derive(Debug, Clone)]
pub struct Initial {
    pub model: ModelParams,
    pub xi: VariationalParams,
    /// The moment start failed and `Zeros` was used instead.
    pub fell_back: bool,
}

impl Initial {
    /// Composite start: both intercepts at the GLM intercept.
    pub fn composite(&self) -> CompositeParams {
        CompositeParams {
            beta0_r: self.model.beta[0],
            beta0_c: self.model.beta[0],
            slopes: self.model.beta[1..].to_vec(),
            sigma2_u: self.model.sigma2_u,
            sigma2_v: self.model.sigma2_v,
        }
    }
}

fn zeros(data: &Dataset) -> Initial {
    Initial {
        model: ModelParams {
            beta: vec![0.0; data.p() + 1],
            sigma2_u: 1.0,
            sigma2_v: 1.0,
        },
        xi: VariationalParams::constant(data.m(), data.n(), 1.0, 1.0),
        fell_back: false,
    }
}

pub fn initialize(data: &Dataset, strategy: InitStrategy, seed: u64) -> Initial {
    match strategy {
        InitStrategy::Zeros => zeros(data),
        InitStrategy::Moments => moments(data),
        InitStrategy::Jittered { sd } => {
            let mut start = moments(data);
            if sd > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let noise = Normal::new(0.0, sd).expect("positive sd");
                for b in start.model.beta.iter_mut() {
                    *b += noise.sample(&mut rng);
                }
                for mu in start.xi.mu_u.iter_mut().chain(start.xi.mu_v.iter_mut()) {
                    *mu += noise.sample(&mut rng);
                }
            }
            start
        }
    }
}

fn moments(data: &Dataset) -> Initial {
    match glm_fit(data) {
        Ok((beta, resid)) => {
            let (m, n) = (data.m(), data.n());
            let row_means: Vec<f64> = (0..m).map(|i| resid[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
            let col_means: Vec<f64> = (0..n)
                .map(|j| (0..m).map(|i| resid[i * n + j]).sum::<f64>() / m as f64)
                .collect();
            let s2u = sample_variance(&row_means).clamp(MOMENT_FLOOR, MOMENT_CEILING);
            let s2v = sample_variance(&col_means).clamp(MOMENT_FLOOR, MOMENT_CEILING);
            Initial {
                model: ModelParams {
                    beta,
                    sigma2_u: s2u,
                    sigma2_v: s2v,
                },
                xi: VariationalParams::constant(m, n, s2u, s2v),
                fell_back: false,
            }
        }
        Err(err) => {
            log::warn!("moment start failed ({err}); using zeros");
            Initial {
                fell_back: true,
                ..zeros(data)
            }
        }
    }
}

fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Fisher scoring for the GLM without random effects. Returns `β` and the
/// working residuals `(y - μ) / (dμ/dη)`.
pub fn glm_fit(data: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let family = data.family();
    let q = data.p() + 1;
    let cells = data.m() * data.n();
    let ybar = data.y().iter().sum::<f64>() / cells as f64;
    let mut beta = vec![0.0; q];
    beta[0] = match family {
        Family::LogisticExperimental => {
            let p = ybar.clamp(1e-6, 1.0 - 1e-6);
            (p / (1.0 - p)).ln()
        }
        _ => ybar.max(1e-10).ln(),
    };
    let design = |idx: usize, k: usize| -> f64 {
        if k == 0 {
            1.0
        } else {
            data.x()[idx * data.p() + k - 1]
        }
    };
    for _ in 0..FISHER_STEPS {
        let mut xtwx = DMatrix::<f64>::zeros(q, q);
        let mut xtwz = DVector::<f64>::zeros(q);
        for idx in 0..cells {
            let eta: f64 = (0..q).map(|k| beta[k] * design(idx, k)).sum();
            let (mean, deriv, var) = link_moments(family, eta);
            let w = deriv * deriv / var;
            let z = eta + (data.y()[idx] - mean) / deriv;
            for a in 0..q {
                let xa = design(idx, a);
                xtwz[a] += w * xa * z;
                for b in 0..q {
                    xtwx[(a, b)] += w * xa * design(idx, b);
                }
            }
        }
        let chol = xtwx
            .cholesky()
            .ok_or_else(|| Error::InvalidParameter("singular Fisher information in GLM start".into()))?;
        let next = chol.solve(&xtwz);
        if next.iter().any(|v| !v.is_finite() || v.abs() > 100.0) {
            return Err(Error::InvalidParameter("GLM start diverged".into()));
        }
        beta = next.iter().copied().collect();
    }
    let resid = (0..cells)
        .map(|idx| {
            let eta: f64 = (0..q).map(|k| beta[k] * design(idx, k)).sum();
            let (mean, deriv, _) = link_moments(family, eta);
            (data.y()[idx] - mean) / deriv
        })
        .collect();
    Ok((beta, resid))
}

/// Mean, `dμ/dη` and variance function at `η` (variance up to dispersion).
fn link_moments(family: Family, eta: f64) -> (f64, f64, f64) {
    match family {
        Family::Poisson => {
            let mu = eta.min(700.0).exp();
            (mu, mu, mu)
        }
        Family::Gamma { .. } => {
            let mu = eta.min(700.0).exp();
            (mu, mu, mu * mu)
        }
        Family::LogisticExperimental => {
            let p = sigmoid(eta);
            let v = (p * (1.0 - p)).max(1e-12);
            (p, v, v)
        }
    }
}
