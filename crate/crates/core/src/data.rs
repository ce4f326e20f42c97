use crate::error::{Error, Result};
use crate::family::Family;

/// A complete `m × n` grid of responses with `p` covariates per cell.
///
/// Cells are stored row-major: cell `(i, j)` lives at `i * n + j`, and its
/// covariates at `x[(i * n + j) * p .. (i * n + j + 1) * p]`. The intercept
/// column is implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    m: usize,
    n: usize,
    p: usize,
    y: Vec<f64>,
    x: Vec<f64>,
    family: Family,
}

impl Dataset {
    pub fn new(m: usize, n: usize, p: usize, y: Vec<f64>, x: Vec<f64>, family: Family) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::Dimension(format!("grid must be non-empty, got {m}x{n}")));
        }
        if y.len() != m * n {
            return Err(Error::Dimension(format!(
                "expected {} responses for a {m}x{n} grid, got {}",
                m * n,
                y.len()
            )));
        }
        if x.len() != m * n * p {
            return Err(Error::Dimension(format!(
                "expected {} covariate values (p = {p}), got {}",
                m * n * p,
                x.len()
            )));
        }
        if let Family::Gamma { shape } = family {
            Family::gamma(shape)?;
        }
        for (idx, &v) in y.iter().enumerate() {
            if !family.accepts(v) {
                return Err(Error::Domain {
                    row: idx / n + 1,
                    col: idx % n + 1,
                    value: v,
                    family: family.name(),
                });
            }
        }
        if let Some(bad) = x.iter().position(|v| !v.is_finite()) {
            let cell = bad / p.max(1);
            return Err(Error::InvalidParameter(format!(
                "non-finite covariate at row {}, column {}",
                cell / n + 1,
                cell % n + 1
            )));
        }
        Ok(Dataset { m, n, p, y, x, family })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of slope covariates (excluding the intercept).
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    #[inline]
    pub fn response(&self, i: usize, j: usize) -> f64 {
        self.y[i * self.n + j]
    }

    #[inline]
    pub fn covariates(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.n + j) * self.p;
        &self.x[start..start + self.p]
    }

    /// `xᵀ slopes` for every cell, row-major, without the intercept.
    pub fn slope_predictor(&self, slopes: &[f64]) -> Vec<f64> {
        debug_assert_eq!(slopes.len(), self.p);
        if self.p == 0 {
            return vec![0.0; self.m * self.n];
        }
        self.x
            .chunks_exact(self.p)
            .map(|row| row.iter().zip(slopes).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Same data with rows reordered so that new row `k` is old row `perm[k]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Dataset {
        assert_eq!(perm.len(), self.m);
        let mut y = Vec::with_capacity(self.y.len());
        let mut x = Vec::with_capacity(self.x.len());
        for &src in perm {
            for j in 0..self.n {
                y.push(self.response(src, j));
                x.extend_from_slice(self.covariates(src, j));
            }
        }
        Dataset { y, x, ..self.clone() }
    }

    /// Same data with columns reordered so that new column `k` is old column `perm[k]`.
    pub fn permute_cols(&self, perm: &[usize]) -> Dataset {
        assert_eq!(perm.len(), self.n);
        let mut y = Vec::with_capacity(self.y.len());
        let mut x = Vec::with_capacity(self.x.len());
        for i in 0..self.m {
            for &src in perm {
                y.push(self.response(i, src));
                x.extend_from_slice(self.covariates(i, src));
            }
        }
        Dataset { y, x, ..self.clone() }
    }

    /// Divide responses and covariates by `scale`.
    pub fn rescaled(&self, scale: f64) -> Result<Dataset> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidParameter(format!("scale must be positive, got {scale}")));
        }
        let y = self.y.iter().map(|v| v / scale).collect();
        let x = self.x.iter().map(|v| v / scale).collect();
        Dataset::new(self.m, self.n, self.p, y, x, self.family)
    }
}
