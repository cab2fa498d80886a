//! Modular latent-connectivity models.
//!
//! Observed variables are grouped into non-overlapping modules by a shared
//! non-negative orthonormal loading matrix `W`; every class `i` then has its
//! own latent covariance `G_i` and isotropic noise level `v_i`, so that
//!
//! ```text
//! Sigma_i = W G_i W^T + v_i I
//! ```
//!
//! Parameters are estimated by score matching under an augmented Lagrangian
//! orthonormality penalty, with a maximum-likelihood estimator kept alongside
//! as an oracle. A two-stage directed variant recovers a per-class linear
//! non-Gaussian acyclic model over the latent modules.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cluster;
pub mod dataset;
pub mod directed;
pub mod error;
pub mod estimation;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod simulation;

pub use dataset::{MultiClassDataset, SampleMoments};
pub use directed::{DirectedFit, StructuralModel};
pub use error::{Error, Result};
pub use estimation::{Estimator, FitConfig, FitDiagnostics, FittedModel};
pub use metrics::EvalReport;
pub use model::ModelParams;
pub use simulation::GroundTruth;

/// Dense matrix type used throughout the crate.
pub type Mat = nalgebra::DMatrix<f64>;
/// Dense column vector type used throughout the crate.
pub type Vector = nalgebra::DVector<f64>;
