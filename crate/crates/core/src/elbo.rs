//! Closed-form Gaussian variational lower bounds and their analytic gradients.
//!
//! Two objectives are provided:
//!
//! * the full bound, with every cell `(i, j)` carrying both `U_i` and `V_j`;
//! * the row-column composite bound, a row block (row intercept, `U_i` only)
//!   plus a column block (column intercept, `V_j` only) sharing the slopes.
//!
//! Both include the Gaussian penalty terms
//! `½ Σ {log(λ/σ²) - (μ² + λ)/σ²}` and drop the constants returned by
//! [`crate::family::constant_offset`]. Gamma cell terms carry the factor
//! `1/a(φ) = α` so the bounds stay valid for any known shape.
//!
//! Sums run in row-major cell order, so values are bit-stable.

use crate::data::Dataset;
use crate::error::{Block, Error, Result};
use crate::family::CellKernel;
use crate::params::{CompositeParams, ModelParams, VariationalParams};

/// Gradient of the full bound on the natural parameter scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FullGradient {
    pub value: f64,
    pub beta: Vec<f64>,
    pub sigma2_u: f64,
    pub sigma2_v: f64,
    pub mu_u: Vec<f64>,
    pub lam_u: Vec<f64>,
    pub mu_v: Vec<f64>,
    pub lam_v: Vec<f64>,
}

/// Gradient of the composite bound on the natural parameter scale.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeGradient {
    pub value: f64,
    pub beta0_r: f64,
    pub beta0_c: f64,
    pub slopes: Vec<f64>,
    pub sigma2_u: f64,
    pub sigma2_v: f64,
    pub mu_u: Vec<f64>,
    pub lam_u: Vec<f64>,
    pub mu_v: Vec<f64>,
    pub lam_v: Vec<f64>,
}

impl FullGradient {
    fn zeros(p: usize, m: usize, n: usize) -> Self {
        FullGradient {
            value: 0.0,
            beta: vec![0.0; p + 1],
            sigma2_u: 0.0,
            sigma2_v: 0.0,
            mu_u: vec![0.0; m],
            lam_u: vec![0.0; m],
            mu_v: vec![0.0; n],
            lam_v: vec![0.0; n],
        }
    }

    /// Derivatives with respect to `log σ²` and `log λ` in place of `σ²`, `λ`.
    pub fn log_scale(&self, psi: &ModelParams, xi: &VariationalParams) -> FullGradient {
        FullGradient {
            sigma2_u: self.sigma2_u * psi.sigma2_u,
            sigma2_v: self.sigma2_v * psi.sigma2_v,
            lam_u: scale_by(&self.lam_u, &xi.lam_u),
            lam_v: scale_by(&self.lam_v, &xi.lam_v),
            ..self.clone()
        }
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(
            self.beta
                .iter()
                .chain([&self.sigma2_u, &self.sigma2_v])
                .chain(self.mu_u.iter().chain(&self.lam_u).chain(&self.mu_v).chain(&self.lam_v)),
        )
    }
}

impl CompositeGradient {
    fn zeros(p: usize, m: usize, n: usize) -> Self {
        CompositeGradient {
            value: 0.0,
            beta0_r: 0.0,
            beta0_c: 0.0,
            slopes: vec![0.0; p],
            sigma2_u: 0.0,
            sigma2_v: 0.0,
            mu_u: vec![0.0; m],
            lam_u: vec![0.0; m],
            mu_v: vec![0.0; n],
            lam_v: vec![0.0; n],
        }
    }

    /// Derivatives with respect to `log σ²` and `log λ` in place of `σ²`, `λ`.
    pub fn log_scale(&self, psi: &CompositeParams, xi: &VariationalParams) -> CompositeGradient {
        CompositeGradient {
            sigma2_u: self.sigma2_u * psi.sigma2_u,
            sigma2_v: self.sigma2_v * psi.sigma2_v,
            lam_u: scale_by(&self.lam_u, &xi.lam_u),
            lam_v: scale_by(&self.lam_v, &xi.lam_v),
            ..self.clone()
        }
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(
            [&self.beta0_r, &self.beta0_c]
                .into_iter()
                .chain(&self.slopes)
                .chain([&self.sigma2_u, &self.sigma2_v])
                .chain(self.mu_u.iter().chain(&self.lam_u).chain(&self.mu_v).chain(&self.lam_v)),
        )
    }
}

fn scale_by(g: &[f64], by: &[f64]) -> Vec<f64> {
    g.iter().zip(by).map(|(a, b)| a * b).collect()
}

fn max_abs<'a>(it: impl Iterator<Item = &'a f64>) -> f64 {
    it.fold(0.0, |acc, v| acc.max(v.abs()))
}

/// `½ {log(λ/σ²) - (μ² + λ)/σ²}` and its partials in `(μ, λ, σ²)`.
#[inline]
pub(crate) fn penalty(mu: f64, lam: f64, s2: f64) -> (f64, f64, f64, f64) {
    let q = mu * mu + lam;
    (
        0.5 * ((lam / s2).ln() - q / s2),
        -mu / s2,
        0.5 * (1.0 / lam - 1.0 / s2),
        0.5 * (q / (s2 * s2) - 1.0 / s2),
    )
}

/// Name the block whose contribution dominates an overflowing exponent.
pub(crate) fn dominant_block(fixed: f64, row: f64, col: f64) -> Block {
    let (f, r, c) = (fixed.abs(), row.abs(), col.abs());
    if r >= f && r >= c {
        Block::RowEffects
    } else if c >= f {
        Block::ColumnEffects
    } else {
        Block::FixedEffects
    }
}

fn check_dims(data: &Dataset, xi: &VariationalParams, n_slopes: usize) -> Result<()> {
    data.family().closed_form()?;
    if xi.m() != data.m() || xi.n() != data.n() {
        return Err(Error::Dimension(format!(
            "variational parameters are {}x{}, data grid is {}x{}",
            xi.m(),
            xi.n(),
            data.m(),
            data.n()
        )));
    }
    if n_slopes != data.p() {
        return Err(Error::Dimension(format!(
            "{} slopes supplied for {} covariates",
            n_slopes,
            data.p()
        )));
    }
    Ok(())
}

/// Full variational lower bound (constants dropped).
pub fn full_elbo(psi: &ModelParams, xi: &VariationalParams, data: &Dataset) -> Result<f64> {
    Ok(full_elbo_grad(psi, xi, data)?.value)
}

/// Full lower bound and its exact gradient, natural scale.
pub fn full_elbo_grad(psi: &ModelParams, xi: &VariationalParams, data: &Dataset) -> Result<FullGradient> {
    check_dims(data, xi, psi.beta.len().saturating_sub(1))?;
    let (m, n, p) = (data.m(), data.n(), data.p());
    let family = data.family();
    let slope_eta = data.slope_predictor(psi.slopes());
    let mut g = FullGradient::zeros(p, m, n);
    let mut cells = 0.0;
    for i in 0..m {
        let (mu_u, lam_u) = (xi.mu_u[i], xi.lam_u[i]);
        for j in 0..n {
            let idx = i * n + j;
            let (mu_v, lam_v) = (xi.mu_v[j], xi.lam_v[j]);
            let eta = psi.beta[0] + slope_eta[idx];
            let kernel = CellKernel::new(family, data.y()[idx]);
            let lin = eta + mu_u + mu_v;
            let half = 0.5 * (lam_u + lam_v);
            let (v, d_lin, d_half) = kernel.eval(lin, half, Block::LinearPredictor).map_err(|_| {
                Error::Overflow {
                    block: dominant_block(eta, mu_u + 0.5 * lam_u, mu_v + 0.5 * lam_v),
                    exponent: kernel.kappa * lin + half,
                }
            })?;
            cells += v;
            g.beta[0] += d_lin;
            for (gb, xk) in g.beta[1..].iter_mut().zip(data.covariates(i, j)) {
                *gb += d_lin * xk;
            }
            g.mu_u[i] += d_lin;
            g.mu_v[j] += d_lin;
            g.lam_u[i] += 0.5 * d_half;
            g.lam_v[j] += 0.5 * d_half;
        }
    }
    let (pen_u, pen_v) = add_penalties(
        xi,
        psi.sigma2_u,
        psi.sigma2_v,
        (&mut g.mu_u, &mut g.lam_u, &mut g.sigma2_u),
        (&mut g.mu_v, &mut g.lam_v, &mut g.sigma2_v),
    );
    g.value = cells + pen_u + pen_v;
    Ok(g)
}

type PenaltySlots<'a> = (&'a mut Vec<f64>, &'a mut Vec<f64>, &'a mut f64);

fn add_penalties(
    xi: &VariationalParams,
    s2_u: f64,
    s2_v: f64,
    row: PenaltySlots<'_>,
    col: PenaltySlots<'_>,
) -> (f64, f64) {
    let side = |mus: &[f64], lams: &[f64], s2: f64, slots: PenaltySlots<'_>| {
        let mut total = 0.0;
        for (k, (&mu, &lam)) in mus.iter().zip(lams).enumerate() {
            let (v, d_mu, d_lam, d_s2) = penalty(mu, lam, s2);
            total += v;
            slots.0[k] += d_mu;
            slots.1[k] += d_lam;
            *slots.2 += d_s2;
        }
        total
    };
    let pu = side(&xi.mu_u, &xi.lam_u, s2_u, row);
    let pv = side(&xi.mu_v, &xi.lam_v, s2_v, col);
    (pu, pv)
}

/// Row-column composite lower bound (constants dropped).
pub fn composite_elbo(psi: &CompositeParams, xi: &VariationalParams, data: &Dataset) -> Result<f64> {
    Ok(composite_elbo_grad(psi, xi, data)?.value)
}

/// Row block and column block of the composite bound, each with its penalty.
pub fn composite_elbo_blocks(
    psi: &CompositeParams,
    xi: &VariationalParams,
    data: &Dataset,
) -> Result<(f64, f64)> {
    let mut rows = 0.0;
    let mut cols = 0.0;
    composite_pass(psi, xi, data, |_, _, _, row, col| {
        rows += row.0;
        cols += col.0;
    })?;
    rows += xi
        .mu_u
        .iter()
        .zip(&xi.lam_u)
        .map(|(&mu, &lam)| penalty(mu, lam, psi.sigma2_u).0)
        .sum::<f64>();
    cols += xi
        .mu_v
        .iter()
        .zip(&xi.lam_v)
        .map(|(&mu, &lam)| penalty(mu, lam, psi.sigma2_v).0)
        .sum::<f64>();
    Ok((rows, cols))
}

/// Composite lower bound and its exact gradient, natural scale.
pub fn composite_elbo_grad(
    psi: &CompositeParams,
    xi: &VariationalParams,
    data: &Dataset,
) -> Result<CompositeGradient> {
    let (m, n, p) = (data.m(), data.n(), data.p());
    let mut g = CompositeGradient::zeros(p, m, n);
    let mut cells = 0.0;
    composite_pass(psi, xi, data, |i, j, x, row, col| {
        cells += row.0 + col.0;
        g.beta0_r += row.1;
        g.beta0_c += col.1;
        for (gs, xk) in g.slopes.iter_mut().zip(x) {
            *gs += (row.1 + col.1) * xk;
        }
        g.mu_u[i] += row.1;
        g.lam_u[i] += 0.5 * row.2;
        g.mu_v[j] += col.1;
        g.lam_v[j] += 0.5 * col.2;
    })?;
    let (pen_u, pen_v) = add_penalties(
        xi,
        psi.sigma2_u,
        psi.sigma2_v,
        (&mut g.mu_u, &mut g.lam_u, &mut g.sigma2_u),
        (&mut g.mu_v, &mut g.lam_v, &mut g.sigma2_v),
    );
    g.value = cells + pen_u + pen_v;
    Ok(g)
}

/// Walk every cell, handing the row-block and column-block kernel outputs
/// `(value, ∂/∂L, ∂/∂h)` to `visit`.
fn composite_pass<F>(psi: &CompositeParams, xi: &VariationalParams, data: &Dataset, mut visit: F) -> Result<()>
where
    F: FnMut(usize, usize, &[f64], (f64, f64, f64), (f64, f64, f64)),
{
    check_dims(data, xi, psi.slopes.len())?;
    let n = data.n();
    let family = data.family();
    let slope_eta = data.slope_predictor(&psi.slopes);
    for i in 0..data.m() {
        let (mu_u, lam_u) = (xi.mu_u[i], xi.lam_u[i]);
        for j in 0..n {
            let idx = i * n + j;
            let (mu_v, lam_v) = (xi.mu_v[j], xi.lam_v[j]);
            let kernel = CellKernel::new(family, data.y()[idx]);
            let eta_r = psi.beta0_r + slope_eta[idx];
            let eta_c = psi.beta0_c + slope_eta[idx];
            let row = kernel
                .eval(eta_r + mu_u, 0.5 * lam_u, Block::RowEffects)
                .map_err(|e| rename_block(e, dominant_block(eta_r, mu_u + 0.5 * lam_u, 0.0)))?;
            let col = kernel
                .eval(eta_c + mu_v, 0.5 * lam_v, Block::ColumnEffects)
                .map_err(|e| rename_block(e, dominant_block(eta_c, 0.0, mu_v + 0.5 * lam_v)))?;
            visit(i, j, data.covariates(i, j), row, col);
        }
    }
    Ok(())
}

fn rename_block(err: Error, block: Block) -> Error {
    match err {
        Error::Overflow { exponent, .. } => Error::Overflow { block, exponent },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::Family;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::E;

    fn one_cell(family: Family, y: f64) -> Dataset {
        Dataset::new(1, 1, 0, vec![y], vec![], family).unwrap()
    }

    #[test]
    fn single_cell_full_bound() {
        let d = one_cell(Family::Poisson, 0.0);
        let psi = ModelParams::new(vec![0.0], 1.0, 1.0).unwrap();
        let xi = VariationalParams::constant(1, 1, 1.0, 1.0);
        assert_abs_diff_eq!(full_elbo(&psi, &xi, &d).unwrap(), -E - 1.0, epsilon = 1e-14);
    }

    #[test]
    fn single_cell_composite_bound() {
        let d = Dataset::new(1, 1, 0, vec![0.0], vec![], Family::Poisson).unwrap();
        let psi = CompositeParams::new(0.0, 0.0, vec![], 1.0, 1.0).unwrap();
        let xi = VariationalParams::constant(1, 1, 1.0, 1.0);
        let (rows, cols) = composite_elbo_blocks(&psi, &xi, &d).unwrap();
        assert_abs_diff_eq!(rows, -(0.5f64).exp() - 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(cols, -(0.5f64).exp() - 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(
            composite_elbo(&psi, &xi, &d).unwrap(),
            -2.0 * (0.5f64).exp() - 1.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn penalties_vanish_to_minus_half_per_effect_at_prior() {
        // y = 0 Poisson cells with a very negative intercept contribute ~0.
        let d = Dataset::new(2, 3, 0, vec![0.0; 6], vec![], Family::Poisson).unwrap();
        let psi = ModelParams::new(vec![-60.0], 0.7, 1.3).unwrap();
        let xi = VariationalParams::constant(2, 3, 0.7, 1.3);
        assert_abs_diff_eq!(full_elbo(&psi, &xi, &d).unwrap(), -2.5, epsilon = 1e-12);
        let g = full_elbo_grad(&psi, &xi, &d).unwrap();
        assert_abs_diff_eq!(g.sigma2_u, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(g.sigma2_v, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn gamma_row_block_btheta_terms_ignore_lambda() {
        // With y → contribution only through -α Σ (η + μ) when y is tiny.
        let alpha = 1.0;
        let y = vec![1e-300; 4];
        let d = Dataset::new(2, 2, 0, y, vec![], Family::Gamma { shape: alpha }).unwrap();
        let psi = CompositeParams::new(0.3, -0.2, vec![], 1.0, 1.0).unwrap();
        let mut xi = VariationalParams::new(vec![0.1, -0.4], vec![0.5, 2.0], vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let pen = |xi: &VariationalParams| -> f64 {
            xi.mu_u.iter().zip(&xi.lam_u).map(|(&m, &l)| penalty(m, l, 1.0).0).sum()
        };
        let (rows, _) = composite_elbo_blocks(&psi, &xi, &d).unwrap();
        let expected = -alpha * (2.0 * (0.3 + 0.1) + 2.0 * (0.3 - 0.4));
        assert_abs_diff_eq!(rows - pen(&xi), expected, epsilon = 1e-12);
        xi.lam_u = vec![3.0, 0.01];
        let (rows, _) = composite_elbo_blocks(&psi, &xi, &d).unwrap();
        assert_abs_diff_eq!(rows - pen(&xi), expected, epsilon = 1e-12);
    }

    #[test]
    fn row_block_is_full_bound_without_column_effects() {
        let y = vec![0.0, 2.0, 1.0, 3.0, 0.0, 1.0];
        let x = vec![0.5, -1.0, 0.2, 0.8, 1.5, -0.3];
        let d = Dataset::new(2, 3, 1, y, x, Family::Poisson).unwrap();
        let psi_rc = CompositeParams::new(-0.4, 0.1, vec![0.3], 0.6, 0.9).unwrap();
        let tiny = 1e-13;
        let xi = VariationalParams::new(vec![0.2, -0.1], vec![0.3, 0.5], vec![0.0; 3], vec![tiny; 3]).unwrap();
        let (rows, _) = composite_elbo_blocks(&psi_rc, &xi, &d).unwrap();
        let psi = ModelParams::new(vec![-0.4, 0.3], 0.6, 0.9).unwrap();
        let full = full_elbo(&psi, &xi, &d).unwrap();
        let col_pen: f64 = (0..3).map(|_| penalty(0.0, tiny, 0.9).0).sum();
        assert_abs_diff_eq!(full - col_pen, rows, epsilon = 1e-9);
    }

    #[test]
    fn intercept_gradients_are_separable() {
        let y = vec![0.0, 2.0, 1.0, 3.0];
        let d = Dataset::new(2, 2, 0, y, vec![], Family::Poisson).unwrap();
        let xi = VariationalParams::new(vec![0.2, -0.1], vec![0.3, 0.5], vec![0.1, 0.0], vec![0.2, 0.4]).unwrap();
        let a = CompositeParams::new(-0.4, 0.1, vec![], 0.6, 0.9).unwrap();
        let b = CompositeParams { beta0_c: 1.7, ..a.clone() };
        let ga = composite_elbo_grad(&a, &xi, &d).unwrap();
        let gb = composite_elbo_grad(&b, &xi, &d).unwrap();
        assert_eq!(ga.beta0_r, gb.beta0_r);
        assert_ne!(ga.beta0_c, gb.beta0_c);
    }

    #[test]
    fn dimension_mismatch_and_logistic_rejected() {
        let d = Dataset::new(2, 2, 0, vec![0.0; 4], vec![], Family::Poisson).unwrap();
        let psi = ModelParams::new(vec![0.0], 1.0, 1.0).unwrap();
        assert!(matches!(
            full_elbo(&psi, &VariationalParams::constant(3, 2, 1.0, 1.0), &d),
            Err(Error::Dimension(_))
        ));
        let psi_bad = ModelParams::new(vec![0.0, 1.0], 1.0, 1.0).unwrap();
        assert!(full_elbo(&psi_bad, &VariationalParams::constant(2, 2, 1.0, 1.0), &d).is_err());
        let dl = Dataset::new(1, 1, 0, vec![1.0], vec![], Family::LogisticExperimental).unwrap();
        assert!(full_elbo(&psi, &VariationalParams::constant(1, 1, 1.0, 1.0), &dl).is_err());
    }

    #[test]
    fn overflow_names_the_row_block() {
        let d = Dataset::new(1, 1, 0, vec![1.0], vec![], Family::Poisson).unwrap();
        let psi = ModelParams::new(vec![0.0], 1.0, 1.0).unwrap();
        let xi = VariationalParams::new(vec![800.0], vec![1.0], vec![0.0], vec![1.0]).unwrap();
        match full_elbo(&psi, &xi, &d) {
            Err(Error::Overflow { block, .. }) => assert_eq!(block, Block::RowEffects),
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn poisson_bounds_are_concave_in_each_mean() {
        let y = vec![0.0, 2.0, 1.0, 3.0, 0.0, 1.0];
        let x = vec![0.5, -1.0, 0.2, 0.8, 1.5, -0.3];
        let d = Dataset::new(2, 3, 1, y, x, Family::Poisson).unwrap();
        let psi = ModelParams::new(vec![-0.4, 0.3], 0.6, 0.9).unwrap();
        let psi_rc = CompositeParams::new(-0.4, 0.1, vec![0.3], 0.6, 0.9).unwrap();
        let base = VariationalParams::new(vec![0.2, -0.1], vec![0.3, 0.5], vec![0.1, 0.0, -0.2], vec![0.2, 0.4, 0.1]).unwrap();
        let grid: Vec<f64> = (0..41).map(|k| -4.0 + 0.2 * k as f64).collect();
        for coord in 0..5 {
            let eval = |t: f64, composite: bool| {
                let mut xi = base.clone();
                if coord < 2 {
                    xi.mu_u[coord] = t;
                } else {
                    xi.mu_v[coord - 2] = t;
                }
                if composite {
                    composite_elbo(&psi_rc, &xi, &d).unwrap()
                } else {
                    full_elbo(&psi, &xi, &d).unwrap()
                }
            };
            for composite in [false, true] {
                let vals: Vec<f64> = grid.iter().map(|&t| eval(t, composite)).collect();
                for w in vals.windows(3) {
                    assert!(w[0] + w[2] - 2.0 * w[1] <= 1e-10, "coordinate {coord}");
                }
            }
        }
    }
}
