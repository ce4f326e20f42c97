//! Intercept recovery and plug-in asymptotic standard errors for the
//! composite-likelihood estimator.

use nalgebra::{Matrix2, Matrix3};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::family::Family;
use crate::params::ModelParams;

/// Invert the intercept shifts of the row and column composite blocks:
/// `β₀ʳ = β₀ + σ²_v/2`, `β₀ᶜ = β₀ + σ²_u/2`.
pub fn recover_intercept(beta0_r: f64, beta0_c: f64, sigma2_u: f64, sigma2_v: f64) -> f64 {
    0.5 * (beta0_r + beta0_c - 0.5 * sigma2_u - 0.5 * sigma2_v)
}

fn gamma_block(s: f64) -> Matrix3<f64> {
    let s2 = s * s;
    Matrix3::new(
        2.0 * s.exp_m1(), 2.0 * s, -s2,
        2.0 * s, 2.0 * s, 0.0,
        -s2, 0.0, s2,
    ) / 8.0
}

/// Row contribution to the intercept covariance.
pub fn gamma1(sigma2_u: f64) -> Matrix3<f64> {
    gamma_block(sigma2_u)
}

/// Column contribution to the intercept covariance.
pub fn gamma2(sigma2_v: f64) -> Matrix3<f64> {
    gamma_block(sigma2_v)
}

/// Random-effect part of the Poisson slope variance.
pub fn gamma3(sigma2_u: f64, sigma2_v: f64) -> Matrix2<f64> {
    let (eu, ev) = (sigma2_u.exp_m1(), sigma2_v.exp_m1());
    let off = eu * ev;
    Matrix2::new(sigma2_u.exp() * ev, off, off, sigma2_v.exp() * eu) / 4.0
}

/// Covariance of the Gamma slope error components.
pub fn sigma_tilde(alpha: f64, sigma2_u: f64, sigma2_v: f64) -> Matrix2<f64> {
    let d = |s: f64| alpha * s.exp_m1() + s.exp();
    Matrix2::new(d(sigma2_v), 1.0, 1.0, d(sigma2_u)) / (4.0 * alpha)
}

fn total<const R: usize, const C: usize>(a: &nalgebra::SMatrix<f64, R, C>) -> f64 {
    a.iter().sum()
}

pub fn se_beta0(sigma2_u: f64, sigma2_v: f64, m: usize, n: usize) -> f64 {
    (total(&gamma1(sigma2_u)) / m as f64 + total(&gamma2(sigma2_v)) / n as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSe {
    pub se_of_variance: f64,
    pub se_of_sd: f64,
}

/// Standard error of `σ̂²` and, by the delta method, of `σ̂`.
pub fn se_sigma(sigma2: f64, count: usize) -> SigmaSe {
    let se_of_variance = std::f64::consts::SQRT_2 * sigma2 / (count as f64).sqrt();
    SigmaSe {
        se_of_variance,
        se_of_sd: se_of_variance / (2.0 * sigma2.sqrt()),
    }
}

pub fn se_beta1_gamma(alpha: f64, sigma2_u: f64, sigma2_v: f64, m: usize, n: usize) -> f64 {
    (total(&sigma_tilde(alpha, sigma2_u, sigma2_v)) / (m * n) as f64).sqrt()
}

/// Law of the scalar covariate, used through its moment-generating function
/// `φ(t) = E exp(tX)` and the derivatives `φ₁`, `φ₂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum MgfSpec {
    Normal { mean: f64, sd: f64 },
    /// Empirical MGF of the observed covariate values.
    Empirical { values: Vec<f64> },
}

impl MgfSpec {
    pub fn empirical(data: &Dataset) -> Result<Self> {
        if data.p() != 1 {
            return Err(Error::Dimension(format!(
                "empirical covariate law needs exactly one covariate, data has {}",
                data.p()
            )));
        }
        Ok(MgfSpec::Empirical {
            values: data.x().to_vec(),
        })
    }

    pub fn name(&self) -> String {
        match self {
            MgfSpec::Normal { mean, sd } => format!("normal(mean={mean}, sd={sd})"),
            MgfSpec::Empirical { values } => format!("empirical({} values)", values.len()),
        }
    }

    /// `(φ(t), φ₁(t), φ₂(t))`.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        match self {
            MgfSpec::Normal { mean, sd } => {
                let v = sd * sd;
                let phi = (mean * t + 0.5 * v * t * t).exp();
                let d = mean + v * t;
                (phi, d * phi, (d * d + v) * phi)
            }
            MgfSpec::Empirical { values } => {
                let k = values.len() as f64;
                let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
                for &x in values {
                    let e = (t * x).exp();
                    a += e;
                    b += x * e;
                    c += x * x * e;
                }
                (a / k, b / k, c / k)
            }
        }
    }

    /// `(τ₁, τ₂)` at slope `beta1`.
    pub fn taus(&self, beta1: f64) -> Result<(f64, f64)> {
        let (p, p1, p2) = self.eval(beta1);
        let (q, q1, q2) = self.eval(2.0 * beta1);
        let denominator = p2 * p - p1 * p1;
        if !(denominator > 1e-12 * p2.abs() * p) || !denominator.is_finite() {
            return Err(Error::SingularMgf {
                law: self.name(),
                denominator,
            });
        }
        let tau1 = p / denominator;
        let tau2 = q2 - 2.0 * p1 * q1 / p + p1 * p1 * q / (p * p);
        Ok((tau1, tau2))
    }
}

pub fn se_beta1_poisson(
    beta0: f64,
    beta1: f64,
    sigma2_u: f64,
    sigma2_v: f64,
    m: usize,
    n: usize,
    covariate_mgf: &MgfSpec,
) -> Result<f64> {
    let (tau1, tau2) = covariate_mgf.taus(beta1)?;
    let var = (-beta0 - 0.5 * sigma2_u - 0.5 * sigma2_v).exp() * tau1
        + tau1 * tau1 * tau2 * total(&gamma3(sigma2_u, sigma2_v));
    Ok((var / (m * n) as f64).sqrt())
}

/// Plug-in quantities behind an [`AsymptoticSE`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeBasis {
    pub sigma2_u: f64,
    pub sigma2_v: f64,
    pub beta0: f64,
    pub beta1: Option<f64>,
    pub m: usize,
    pub n: usize,
    pub alpha: Option<f64>,
    pub covariate_law: Option<String>,
    pub tau1: Option<f64>,
    pub tau2: Option<f64>,
    /// Why `se_beta1` is missing, when it is.
    pub beta1_note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticSE {
    pub se_beta0: f64,
    pub se_beta1: Option<f64>,
    pub se_sigma_u: f64,
    pub se_sigma_v: f64,
    pub se_sigma2_u: f64,
    pub se_sigma2_v: f64,
    pub basis: SeBasis,
}

/// Plug-in standard errors at `estimates` for an `m × n` grid.
///
/// The slope formulas cover a single covariate. The Poisson slope needs the
/// covariate law; without one `se_beta1` is left empty.
pub fn standard_errors(
    estimates: &ModelParams,
    family: Family,
    m: usize,
    n: usize,
    covariate_mgf: Option<&MgfSpec>,
) -> Result<AsymptoticSE> {
    let (su, sv) = (estimates.sigma2_u, estimates.sigma2_v);
    if !(su > 0.0 && sv > 0.0) {
        return Err(Error::InvalidParameter("variance estimates must be positive".into()));
    }
    let beta0 = estimates.intercept();
    let beta1 = (estimates.slopes().len() == 1).then(|| estimates.slopes()[0]);
    let mut basis = SeBasis {
        sigma2_u: su,
        sigma2_v: sv,
        beta0,
        beta1,
        m,
        n,
        alpha: family.shape(),
        covariate_law: None,
        tau1: None,
        tau2: None,
        beta1_note: None,
    };
    let se_beta1 = match (beta1, family) {
        (None, _) => {
            basis.beta1_note = Some(format!(
                "slope formula covers one covariate; model has {}",
                estimates.slopes().len()
            ));
            None
        }
        (Some(_), Family::Gamma { shape }) => Some(se_beta1_gamma(shape, su, sv, m, n)),
        (Some(b1), Family::Poisson) => match covariate_mgf {
            Some(law) => {
                let (t1, t2) = law.taus(b1)?;
                basis.covariate_law = Some(law.name());
                basis.tau1 = Some(t1);
                basis.tau2 = Some(t2);
                Some(se_beta1_poisson(beta0, b1, su, sv, m, n, law)?)
            }
            None => {
                basis.beta1_note = Some("no covariate law supplied".into());
                None
            }
        },
        (Some(_), Family::LogisticExperimental) => {
            basis.beta1_note = Some("no asymptotic theory for the logistic model".into());
            None
        }
    };
    let (ru, rv) = (se_sigma(su, m), se_sigma(sv, n));
    Ok(AsymptoticSE {
        se_beta0: se_beta0(su, sv, m, n),
        se_beta1,
        se_sigma_u: ru.se_of_sd,
        se_sigma_v: rv.se_of_sd,
        se_sigma2_u: ru.se_of_variance,
        se_sigma2_v: rv.se_of_variance,
        basis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn intercept_recovery_examples() {
        assert_abs_diff_eq!(recover_intercept(-1.875, -1.875, 0.25, 0.25), -2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(recover_intercept(0.7, 0.7, 1e-300, 1e-300), 0.7, epsilon = 1e-15);
    }

    #[test]
    fn gamma1_entries() {
        let g = gamma1(0.25);
        assert_abs_diff_eq!(total(&g), (2.0 * 0.25f64.exp_m1() + 1.5 - 0.0625) / 8.0, epsilon = 1e-15);
        assert_abs_diff_eq!(total(&g), 0.250694, epsilon = 1e-6);
        for s in [0.01, 0.3, 2.0, 4.0] {
            let g = gamma1(s);
            assert_eq!(g, g.transpose());
            assert_eq!(g[(1, 2)], 0.0);
            assert_eq!(gamma2(s), g);
        }
    }

    #[test]
    fn gamma3_total() {
        let e = 0.25f64.exp();
        let want = (2.0 * e * (e - 1.0) + 2.0 * (e - 1.0).powi(2)) / 4.0;
        assert_abs_diff_eq!(total(&gamma3(0.25, 0.25)), want, epsilon = 1e-15);
        assert_abs_diff_eq!(want, 0.2227, epsilon = 1e-4);
    }

    #[test]
    fn intercept_se_examples() {
        assert_abs_diff_eq!(se_beta0(0.25, 0.25, 50, 50), 0.1001, epsilon = 1e-4);
        assert_abs_diff_eq!(se_beta0(0.25, 0.25, 100, 100), 0.0708, epsilon = 1e-4);
        let ratio = se_beta0(0.3, 0.7, 40, 60) / se_beta0(0.3, 0.7, 80, 120);
        assert_abs_diff_eq!(ratio, std::f64::consts::SQRT_2, epsilon = 1e-14);
    }

    #[test]
    fn sigma_se_examples() {
        let r = se_sigma(0.25, 50);
        assert_abs_diff_eq!(r.se_of_variance, 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(r.se_of_sd, 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(se_sigma(0.25, 100).se_of_sd, 0.0354, epsilon = 1e-4);
        assert_abs_diff_eq!(se_sigma(0.4, 10).se_of_variance / se_sigma(0.4, 40).se_of_variance, 2.0, epsilon = 1e-14);
    }

    #[test]
    fn gamma_slope_se_examples() {
        let s = sigma_tilde(0.8, 0.25, 0.25);
        assert_abs_diff_eq!(s[(0, 0)], 0.4723, epsilon = 1e-4);
        assert_abs_diff_eq!(s[(0, 1)], 1.0 / 3.2, epsilon = 1e-15);
        assert_eq!(s[(0, 1)], s[(1, 0)]);
        assert_abs_diff_eq!(se_beta1_gamma(0.8, 0.25, 0.25, 50, 50), 0.0251, epsilon = 1e-4);
        assert_abs_diff_eq!(se_beta1_gamma(0.8, 0.25, 0.25, 100, 100), 0.0125, epsilon = 1e-4);
    }

    #[test]
    fn normal_mgf_at_design_slope() {
        let law = MgfSpec::Normal { mean: 1.0, sd: 1.0 };
        let (p, p1, p2) = law.eval(-2.0);
        assert_abs_diff_eq!(p, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p1, -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p2, 2.0, epsilon = 1e-15);
        let (t1, t2) = law.taus(-2.0).unwrap();
        assert_abs_diff_eq!(t1, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t2, 5.0 * 4f64.exp(), epsilon = 1e-10);
        let se = se_beta1_poisson(-2.0, -2.0, 0.25, 0.25, 50, 50, &law).unwrap();
        assert!(se.is_finite() && se > 0.0);
    }

    #[test]
    fn degenerate_covariate_law_is_an_error() {
        let law = MgfSpec::Empirical { values: vec![1.5; 10] };
        assert!(matches!(
            se_beta1_poisson(-2.0, -2.0, 0.25, 0.25, 5, 5, &law),
            Err(Error::SingularMgf { .. })
        ));
    }

    #[test]
    fn empirical_mgf_matches_definition() {
        let law = MgfSpec::Empirical { values: vec![0.0, 1.0, 2.0] };
        let (p, p1, p2) = law.eval(0.5);
        let e = |x: f64| (0.5 * x).exp();
        assert_abs_diff_eq!(p, (1.0 + e(1.0) + e(2.0)) / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p1, (e(1.0) + 2.0 * e(2.0)) / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p2, (e(1.0) + 4.0 * e(2.0)) / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn standard_errors_are_positive() {
        let est = ModelParams::new(vec![-2.0, -2.0], 0.25, 0.25).unwrap();
        let law = MgfSpec::Normal { mean: 1.0, sd: 1.0 };
        for family in [Family::Poisson, Family::Gamma { shape: 0.8 }] {
            let se = standard_errors(&est, family, 50, 50, Some(&law)).unwrap();
            for v in [se.se_beta0, se.se_beta1.unwrap(), se.se_sigma_u, se.se_sigma_v] {
                assert!(v.is_finite() && v > 0.0);
            }
        }
        let se = standard_errors(&est, Family::Poisson, 50, 50, None).unwrap();
        assert!(se.se_beta1.is_none() && se.basis.beta1_note.is_some());
    }

    fn is_psd3(a: &Matrix3<f64>) -> bool {
        a.symmetric_eigenvalues().iter().all(|&l| l >= -1e-12 * a.norm())
    }

    #[test]
    fn covariances_are_psd_on_grid() {
        let grid: Vec<f64> = (0..=40).map(|k| 0.01 * (400f64).powf(k as f64 / 40.0)).collect();
        for &s in &grid {
            assert!(is_psd3(&gamma1(s)), "gamma1({s})");
            for &t in &grid {
                for alpha in [0.1, 0.8, 5.0] {
                    let st = sigma_tilde(alpha, s, t);
                    assert_eq!(st, st.transpose());
                    assert!(st.symmetric_eigenvalues().iter().all(|&l| l >= 0.0), "sigma_tilde({alpha},{s},{t})");
                }
                let g3 = gamma3(s, t);
                assert_eq!(g3, g3.transpose());
            }
        }
    }

    proptest! {
        #[test]
        fn recovery_inverts_shifts(b in -10.0f64..10.0, su in 1e-6f64..5.0, sv in 1e-6f64..5.0) {
            let r = recover_intercept(b + sv / 2.0, b + su / 2.0, su, sv);
            prop_assert!((r - b).abs() < 1e-12);
        }
    }
}
