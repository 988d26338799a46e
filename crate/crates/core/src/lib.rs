//! Mixtures of Poisson factor models for multivariate count data.
//!
//! Counts are modelled as conditionally independent Poissons whose log rates
//! are linear in a low-dimensional latent vector, and the latent vector
//! follows a Gaussian mixture, so clustering and dimension reduction happen
//! together. Estimation is by a generalized EM algorithm with Gauss-Hermite
//! quadrature over the latent space.

// `!(x > 0.0)` style tests also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod cluster;
pub mod covariates;
pub mod em;
pub mod error;
pub mod io;
pub mod model;
pub mod quadrature;
pub mod rotation;
pub mod selection;
pub mod simulation;

pub use covariates::{DesignMatrix, LogitCoefficients};
pub use em::{fit, EStepSummary, FirstIntercept, FitConfig, FitResult, InitStrategy};
pub use error::{Error, Result};
pub use model::{CountMatrix, LatentMixture, Loadings, ModelDims, Theta};
pub use quadrature::TensorGrid;
pub use rotation::{oblimin_rotate, RotationResult};
pub use selection::{grid_search, SelectionTable};
