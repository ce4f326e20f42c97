use std::fmt;

use thiserror::Error;

/// Parameter block named in overflow / divergence diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    FixedEffects,
    RowEffects,
    ColumnEffects,
    LinearPredictor,
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Block::FixedEffects => "fixed effects",
            Block::RowEffects => "row effects",
            Block::ColumnEffects => "column effects",
            Block::LinearPredictor => "linear predictor",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("family {0} is not supported by this operation")]
    UnsupportedFamily(&'static str),

    #[error("exponent {exponent:.3} exceeds the overflow cap in the {block} block")]
    Overflow { block: Block, exponent: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("response {value} at row {row}, column {col} is outside the {family} domain")]
    Domain {
        row: usize,
        col: usize,
        value: f64,
        family: &'static str,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("composite fit needs at least a 2x2 grid, got {m}x{n}")]
    DegenerateGrid { m: usize, n: usize },

    #[error("quadrature failure: {0}")]
    Quadrature(String),

    #[error("singular covariate law {law}: phi2*phi - phi1^2 = {denominator:e}")]
    SingularMgf { law: String, denominator: f64 },

    #[error("optimizer diverged in the {block} block")]
    Divergence { block: Block },

    #[error("line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
