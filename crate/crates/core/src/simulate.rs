//! Synthetic crossed-random-effects data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::family::{sigmoid, Family};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum CovariateLaw {
    /// Independent `N(mean, sd²)` draws, one per covariate per cell.
    Normal { mean: f64, sd: f64 },
    /// Covariates supplied row-major, `m * n * p` values.
    Fixed { p: usize, values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub family: Family,
    pub m: usize,
    pub n: usize,
    /// `(β₀, β₁, …)`; its length fixes the number of covariates.
    pub beta: Vec<f64>,
    pub sigma_u: f64,
    pub sigma_v: f64,
    pub covariate_law: CovariateLaw,
    pub seed: u64,
}

impl SimSpec {
    /// The standard design: `X ~ N(1, 1)`, `β = (-2, -2)`, `σ_u = σ_v = 0.5`.
    pub fn reference(family: Family, m: usize, n: usize, seed: u64) -> Self {
        SimSpec {
            family,
            m,
            n,
            beta: vec![-2.0, -2.0],
            sigma_u: 0.5,
            sigma_v: 0.5,
            covariate_law: CovariateLaw::Normal { mean: 1.0, sd: 1.0 },
            seed,
        }
    }

    fn p(&self) -> usize {
        self.beta.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::InvalidParameter("m and n must be positive".into()));
        }
        if self.beta.is_empty() || self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidParameter("beta needs a finite intercept".into()));
        }
        if !(self.sigma_u > 0.0 && self.sigma_v > 0.0) || !self.sigma_u.is_finite() || !self.sigma_v.is_finite() {
            return Err(Error::InvalidParameter("sigma_u and sigma_v must be positive".into()));
        }
        match &self.covariate_law {
            CovariateLaw::Normal { mean, sd } => {
                if !mean.is_finite() || !(*sd >= 0.0) || !sd.is_finite() {
                    return Err(Error::InvalidParameter("covariate law needs finite mean and sd >= 0".into()));
                }
            }
            CovariateLaw::Fixed { p, values } => {
                if *p != self.p() || values.len() != self.m * self.n * p {
                    return Err(Error::Dimension(format!(
                        "fixed covariates: {} values for p={} on a {}x{} grid with {} slopes",
                        values.len(),
                        p,
                        self.m,
                        self.n,
                        self.p()
                    )));
                }
            }
        }
        if let Family::Gamma { shape } = self.family {
            Family::gamma(shape)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub data: Dataset,
    pub spec: SimSpec,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Per-replicate seed from a base seed, independent of execution order.
pub fn replicate_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw_response<R: Rng>(family: Family, eta: f64, rng: &mut R) -> Result<f64> {
    Ok(match family {
        Family::Poisson => {
            let mean = eta.exp();
            if mean <= 0.0 {
                0.0
            } else if !mean.is_finite() || mean > 1e15 {
                return Err(Error::InvalidParameter(format!("Poisson mean {mean:e} out of range")));
            } else {
                Poisson::new(mean).expect("valid mean").sample(rng)
            }
        }
        Family::Gamma { shape } => {
            let mean = eta.exp();
            if !(mean > 0.0 && mean.is_finite()) {
                return Err(Error::InvalidParameter(format!("Gamma mean {mean:e} out of range")));
            }
            let y: f64 = Gamma::new(shape, mean / shape).expect("valid gamma").sample(rng);
            // Guard the measure-zero underflow to 0, outside the Gamma support.
            y.max(f64::MIN_POSITIVE)
        }
        Family::LogisticExperimental => {
            let p = sigmoid(eta);
            f64::from(u8::from(Bernoulli::new(p).expect("probability").sample(rng)))
        }
    })
}

/// Draw `U`, `V`, covariates and responses in that order from one stream.
pub fn simulate(spec: &SimSpec) -> Result<Simulated> {
    spec.validate()?;
    let (m, n, p) = (spec.m, spec.n, spec.p());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let u: Vec<f64> = Normal::new(0.0, spec.sigma_u)
        .expect("positive sd")
        .sample_iter(&mut rng)
        .take(m)
        .collect();
    let v: Vec<f64> = Normal::new(0.0, spec.sigma_v)
        .expect("positive sd")
        .sample_iter(&mut rng)
        .take(n)
        .collect();
    let x: Vec<f64> = match &spec.covariate_law {
        CovariateLaw::Normal { mean, sd } => {
            let law = Normal::new(*mean, *sd).expect("validated");
            (0..m * n * p).map(|_| law.sample(&mut rng)).collect()
        }
        CovariateLaw::Fixed { values, .. } => values.clone(),
    };
    let mut y = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let idx = i * n + j;
            let slope: f64 = spec.beta[1..].iter().zip(&x[idx * p..(idx + 1) * p]).map(|(b, x)| b * x).sum();
            let eta = spec.beta[0] + slope + u[i] + v[j];
            y.push(draw_response(spec.family, eta, &mut rng)?);
        }
    }
    let data = Dataset::new(m, n, p, y, x, spec.family)?;
    Ok(Simulated {
        data,
        spec: spec.clone(),
        u,
        v,
    })
}

/// `draws` independent responses at a single linear predictor, for checking
/// the conditional law.
pub fn repeated_cell_draws(family: Family, eta: f64, draws: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..draws).map(|_| draw_response(family, eta, &mut rng)).collect()
}
