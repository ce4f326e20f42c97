//! Exponential-family kernels for the crossed random-effects models.
//!
//! Each response satisfies `log f(y | θ) = {yθ - b(θ)}/a(φ) + c(y, φ)` with a
//! log link, so the linear predictor `η = xᵀβ + U + V` is the log mean. Under
//! independent Gaussian variational factors for `U` and `V` the expectations
//! of `θ` and `b(θ)` have closed forms for Poisson and Gamma responses; the
//! functions here evaluate them.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::Dataset;
use crate::error::{Block, Error, Result};

/// Largest exponent accepted before evaluating `exp`.
pub const EXP_CAP: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Poisson,
    /// Gamma responses with known shape `α` (dispersion `a(φ) = 1/α`).
    Gamma { shape: f64 },
    /// Bernoulli responses with logit link; only the quadrature-based
    /// experimental fit supports it.
    LogisticExperimental,
}

impl Family {
    pub fn gamma(shape: f64) -> Result<Self> {
        if shape.is_finite() && shape > 0.0 {
            Ok(Family::Gamma { shape })
        } else {
            Err(Error::InvalidParameter(format!(
                "gamma shape must be positive and finite, got {shape}"
            )))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Poisson => "poisson",
            Family::Gamma { .. } => "gamma",
            Family::LogisticExperimental => "logistic",
        }
    }

    /// `1 / a(φ)`: 1 for Poisson and logistic, `α` for Gamma.
    pub fn data_weight(&self) -> f64 {
        match self {
            Family::Gamma { shape } => *shape,
            _ => 1.0,
        }
    }

    pub fn shape(&self) -> Option<f64> {
        match self {
            Family::Gamma { shape } => Some(*shape),
            _ => None,
        }
    }

    /// Whether `y` lies in the response domain.
    pub fn accepts(&self, y: f64) -> bool {
        match self {
            Family::Poisson => y.is_finite() && y >= 0.0 && y.fract() == 0.0,
            Family::Gamma { .. } => y.is_finite() && y > 0.0,
            Family::LogisticExperimental => y == 0.0 || y == 1.0,
        }
    }

    pub(crate) fn closed_form(&self) -> Result<()> {
        match self {
            Family::LogisticExperimental => Err(Error::UnsupportedFamily("logistic")),
            _ => Ok(()),
        }
    }
}

/// `exp(x)` that refuses exponents above [`EXP_CAP`].
#[inline]
pub fn guarded_exp(x: f64, block: Block) -> Result<f64> {
    if x > EXP_CAP || x.is_nan() {
        Err(Error::Overflow { block, exponent: x })
    } else {
        Ok(x.exp())
    }
}

/// `E θ` under `U ~ N(μ_u, λ_u)`, `V ~ N(μ_v, λ_v)`.
pub fn e_theta_joint(
    family: Family,
    eta: f64,
    mu_u: f64,
    lam_u: f64,
    mu_v: f64,
    lam_v: f64,
) -> Result<f64> {
    check_variances(lam_u, lam_v)?;
    match family {
        Family::Poisson => Ok(eta + mu_u + mu_v),
        Family::Gamma { .. } => Ok(-guarded_exp(
            -eta - mu_u + lam_u / 2.0 - mu_v + lam_v / 2.0,
            Block::LinearPredictor,
        )?),
        Family::LogisticExperimental => Err(Error::UnsupportedFamily("logistic")),
    }
}

/// `E b(θ)` under `U ~ N(μ_u, λ_u)`, `V ~ N(μ_v, λ_v)`.
pub fn e_btheta_joint(
    family: Family,
    eta: f64,
    mu_u: f64,
    lam_u: f64,
    mu_v: f64,
    lam_v: f64,
) -> Result<f64> {
    check_variances(lam_u, lam_v)?;
    match family {
        Family::Poisson => guarded_exp(
            eta + mu_u + lam_u / 2.0 + mu_v + lam_v / 2.0,
            Block::LinearPredictor,
        ),
        Family::Gamma { .. } => Ok(eta + mu_u + mu_v),
        Family::LogisticExperimental => Err(Error::UnsupportedFamily("logistic")),
    }
}

/// Single-effect `E θ^r` for the row-composite model (`θ^r` built from `xᵀβ^r + U_i`).
pub fn e_theta_row(family: Family, eta: f64, mu: f64, lam: f64) -> Result<f64> {
    e_theta_joint(family, eta, mu, lam, 0.0, 0.0)
}

pub fn e_btheta_row(family: Family, eta: f64, mu: f64, lam: f64) -> Result<f64> {
    e_btheta_joint(family, eta, mu, lam, 0.0, 0.0)
}

/// Single-effect `E θ^c` for the column-composite model.
pub fn e_theta_col(family: Family, eta: f64, mu: f64, lam: f64) -> Result<f64> {
    e_theta_joint(family, eta, 0.0, 0.0, mu, lam)
}

pub fn e_btheta_col(family: Family, eta: f64, mu: f64, lam: f64) -> Result<f64> {
    e_btheta_joint(family, eta, 0.0, 0.0, mu, lam)
}

fn check_variances(lam_u: f64, lam_v: f64) -> Result<()> {
    if lam_u >= 0.0 && lam_v >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "variational variances must be nonnegative, got {lam_u} and {lam_v}"
        )))
    }
}

/// Full conditional log-density of `y` given linear predictor `eta`,
/// normalizing constants included.
pub fn log_density(family: Family, y: f64, eta: f64) -> Result<f64> {
    if !family.accepts(y) {
        return Err(Error::Domain {
            row: 0,
            col: 0,
            value: y,
            family: family.name(),
        });
    }
    match family {
        Family::Poisson => Ok(y * eta - guarded_exp(eta, Block::LinearPredictor)? - ln_gamma(y + 1.0)),
        Family::Gamma { shape } => {
            let theta = -guarded_exp(-eta, Block::LinearPredictor)?;
            Ok(shape * (y * theta - eta) + gamma_constant(shape, y))
        }
        Family::LogisticExperimental => Ok(y * eta - softplus(eta)),
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gamma_constant(shape: f64, y: f64) -> f64 {
    shape * shape.ln() - ln_gamma(shape) + (shape - 1.0) * y.ln()
}

/// `c(y, φ)` for one response.
pub fn cell_constant(family: Family, y: f64) -> f64 {
    match family {
        Family::Poisson => -ln_gamma(y + 1.0),
        Family::Gamma { shape } => gamma_constant(shape, y),
        Family::LogisticExperimental => 0.0,
    }
}

/// Which variational lower bound a constant offset is aligned with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LowerBound {
    Full,
    Composite,
}

/// Constants dropped from the closed-form lower bounds.
///
/// Adding this to `full_elbo` (resp. `composite_elbo`) gives a true lower
/// bound on the marginal (resp. row-column composite) log-likelihood with
/// all density normalizers included. Each Gaussian factor drops `1/2`; the
/// composite bound counts every cell twice, once per block.
pub fn constant_offset(data: &Dataset, bound: LowerBound) -> f64 {
    let family = data.family();
    let cells: f64 = data.y().iter().map(|&y| cell_constant(family, y)).sum();
    let effects = 0.5 * (data.m() + data.n()) as f64;
    match bound {
        LowerBound::Full => cells + effects,
        LowerBound::Composite => 2.0 * cells + effects,
    }
}

/// Closed-form per-cell kernel: `w [a L - c exp(κ L + h)]`, where `L` is the
/// mean of the linear predictor and `h` half its variational variance.
///
/// Poisson: `a = y, c = 1, κ = 1, w = 1`. Gamma: `a = -1, c = y, κ = -1, w = α`.
/// The value equals `w [y E θ - E b(θ)]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CellKernel {
    pub a: f64,
    pub c: f64,
    pub kappa: f64,
    pub weight: f64,
}

impl CellKernel {
    #[inline]
    pub fn new(family: Family, y: f64) -> Self {
        match family {
            Family::Gamma { shape } => CellKernel {
                a: -1.0,
                c: y,
                kappa: -1.0,
                weight: shape,
            },
            _ => CellKernel {
                a: y,
                c: 1.0,
                kappa: 1.0,
                weight: 1.0,
            },
        }
    }

    /// Value and partials `(∂/∂L, ∂/∂h)`.
    #[inline]
    pub fn eval(&self, lin: f64, half_var: f64, block: Block) -> Result<(f64, f64, f64)> {
        let e = self.c * guarded_exp(self.kappa * lin + half_var, block)?;
        let w = self.weight;
        Ok((
            w * (self.a * lin - e),
            w * (self.a - self.kappa * e),
            -w * e,
        ))
    }
}
