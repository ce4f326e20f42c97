//! Gaussian variational approximation for Poisson and Gamma regression with
//! crossed random effects, fitted either to the full likelihood or to the
//! row-column composite likelihood.
//!
//! ```
//! use gvacl::{fit, simulate, FitConfig, Family, Method, SimSpec};
//!
//! let sim = simulate(&SimSpec::reference(Family::Poisson, 20, 20, 1)).unwrap();
//! let r = fit(&sim.data, &FitConfig::new(Method::Gvacl)).unwrap();
//! assert!(r.converged);
//! ```

pub mod bench;
pub mod csv_io;
pub mod data;
pub mod elbo;
pub mod error;
pub mod family;
pub mod fit;
pub mod inference;
pub mod init;
pub mod lbfgs;
pub mod logistic;
pub mod params;
pub mod quadrature;
pub mod simulate;

pub use data::Dataset;
pub use error::{Block, Error, Result};
pub use family::{constant_offset, Family, LowerBound};
pub use fit::{fit, FitConfig, FitResult, Method, Scheme};
pub use inference::{standard_errors, AsymptoticSE, MgfSpec};
pub use init::InitStrategy;
pub use params::{CompositeParams, ModelParams, VariationalParams};
pub use simulate::{simulate, SimSpec};
