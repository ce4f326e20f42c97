use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed effects `β` (intercept first) and the two variance components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: Vec<f64>,
    pub sigma2_u: f64,
    pub sigma2_v: f64,
}

impl ModelParams {
    pub fn new(beta: Vec<f64>, sigma2_u: f64, sigma2_v: f64) -> Result<Self> {
        check_positive("sigma2_u", sigma2_u)?;
        check_positive("sigma2_v", sigma2_v)?;
        if beta.is_empty() {
            return Err(Error::Dimension("beta must contain at least the intercept".into()));
        }
        Ok(ModelParams { beta, sigma2_u, sigma2_v })
    }

    pub fn intercept(&self) -> f64 {
        self.beta[0]
    }

    pub fn slopes(&self) -> &[f64] {
        &self.beta[1..]
    }
}

/// Parameters of the row-column composite likelihood: separate row and
/// column intercepts, shared slopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeParams {
    pub beta0_r: f64,
    pub beta0_c: f64,
    pub slopes: Vec<f64>,
    pub sigma2_u: f64,
    pub sigma2_v: f64,
}

impl CompositeParams {
    pub fn new(beta0_r: f64, beta0_c: f64, slopes: Vec<f64>, sigma2_u: f64, sigma2_v: f64) -> Result<Self> {
        check_positive("sigma2_u", sigma2_u)?;
        check_positive("sigma2_v", sigma2_v)?;
        Ok(CompositeParams {
            beta0_r,
            beta0_c,
            slopes,
            sigma2_u,
            sigma2_v,
        })
    }
}

/// Means and variances of the independent Gaussian factors for every row
/// effect `U_i` and column effect `V_j`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    pub mu_u: Vec<f64>,
    pub lam_u: Vec<f64>,
    pub mu_v: Vec<f64>,
    pub lam_v: Vec<f64>,
}

impl VariationalParams {
    pub fn new(mu_u: Vec<f64>, lam_u: Vec<f64>, mu_v: Vec<f64>, lam_v: Vec<f64>) -> Result<Self> {
        if mu_u.len() != lam_u.len() || mu_v.len() != lam_v.len() {
            return Err(Error::Dimension("mean and variance vectors differ in length".into()));
        }
        for (name, v) in [("lam_u", &lam_u), ("lam_v", &lam_v)] {
            if let Some(bad) = v.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
                return Err(Error::InvalidParameter(format!("{name} entries must be positive, got {bad}")));
            }
        }
        Ok(VariationalParams { mu_u, lam_u, mu_v, lam_v })
    }

    /// Zero means with constant variances.
    pub fn constant(m: usize, n: usize, lam_u: f64, lam_v: f64) -> Self {
        VariationalParams {
            mu_u: vec![0.0; m],
            lam_u: vec![lam_u; m],
            mu_v: vec![0.0; n],
            lam_v: vec![lam_v; n],
        }
    }

    pub fn m(&self) -> usize {
        self.mu_u.len()
    }

    pub fn n(&self) -> usize {
        self.mu_v.len()
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
    }
}
