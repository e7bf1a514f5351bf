//! Ensemble data assimilation on the Lorenz-95 ring and contextual model
//! evidence (CME) for selecting between competing model versions.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] – the Lorenz-95 tendency, RK4 integrator and free runs.
//! * [`twin`] – truth trajectories, synthetic observations, the linear
//!   observation operator and the CSV/JSON archive format.
//! * [`localization`] – taper functions and ring geometry.
//! * [`enkf`] – ETKF/LETKF analyses with multiplicative inflation.
//! * [`evidence`] – global, local, domain-localized and covariance-localized
//!   CME estimators and evidencing-window accumulation.
//! * [`selection`] – RMSE scores, confidence deltas, selection probability,
//!   ROC curves and Gini coefficients.
//! * [`experiment`] – config-driven orchestration of the selection
//!   experiments and their CSV reports.

// `!(x > 0.0)` also rejects NaN; RK4 stages index several arrays in lockstep.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod enkf;
pub mod error;
pub mod evidence;
pub mod experiment;
pub mod linalg;
pub mod localization;
pub mod model;
pub mod rng;
pub mod selection;
pub mod twin;

pub use error::{Error, Result};
