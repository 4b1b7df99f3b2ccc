//! Stochastic optimal control of Galerkin-truncated semilinear SPDEs.
//!
//! The state lives in the span of the first `n` Dirichlet sine modes on
//! `(0,1)`. [`forward`] integrates the controlled equation with a
//! semi-implicit Euler–Maruyama scheme, [`sensitivity`] solves the
//! linearized equation, [`adjoint`] solves the backward costate equation,
//! and [`optimizer`] turns the costate into control gradients. [`harness`]
//! runs the verification experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod error;
pub mod forward;
pub mod harness;
pub mod models;
pub mod optimizer;
pub mod sensitivity;
pub mod spectral;
pub mod stats;
pub mod wiener;

pub use adjoint::{AdjointMethod, AdjointPath, RegressionBasis};
pub use error::{Error, Result};
pub use forward::{ControlPath, ForwardPath};
pub use models::{BuiltinModel, ControlSet, ProblemSpec};
pub use spectral::{HsOperator, SpectralField, SpectralSpace};
pub use wiener::{PathBatch, PathId, WienerPath};
