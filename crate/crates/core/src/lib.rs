//! Maximum-likelihood estimation of job-amenity and productivity values in a
//! one-to-one matching market with transferable utility, when both matches and
//! (noisy) transfers are observed.
//!
//! The crate is `no_std` (with `alloc`). File formats, configuration and the
//! command-line front end live in the companion `matchwage` crate.
//!
//! Layout:
//! - [`model`]: samples, basis functions, parameter vector.
//! - [`equilibrium`]: log-domain IPFP for the potential system and the implicit
//!   derivatives of the potentials.
//! - [`classes`]: collapses repeated covariate rows so the solver works on
//!   distinct types.
//! - [`likelihood`]: matching and transfer log-likelihood, analytic gradient,
//!   concentrated likelihood.
//! - [`estimator`]: quasi-Newton maximization, standard errors, reports.
//! - [`sim`]: ground-truth grid markets and sampling.
//! - [`analysis`]: VSL, hedonic baseline, counterfactual equilibria, Gini.

#![cfg_attr(not(any(feature = "std", test)), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod analysis;
pub mod classes;
pub mod equilibrium;
pub mod error;
pub mod estimator;
pub mod likelihood;
mod linalg;
pub mod model;
pub mod ols;
pub mod optim;
pub mod sim;

pub use error::{Error, Result};

/// Version of this library, echoed in reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub use model::{BasisSpec, BasisTerm, MatchSample, Theta};
