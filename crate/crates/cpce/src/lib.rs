//! Estimation of conditional principal causal effects (CPCEs) for never-takers,
//! compliers and always-takers under monotonicity and principal ignorability.
//!
//! The crate is organised bottom-up:
//!
//! * [`data`]: validated sample tables and observed-cell bookkeeping.
//! * [`learners`]: logistic, OLS, kernel and additive-spline regressions.
//! * [`identification`]: principal scores, subset propensities, psi-scores and
//!   the subset, EIF-ratio and one-step pseudo-outcomes.
//! * [`estimators`]: T-learner, subset, EIF and one-step estimators with
//!   cross-fitting and pointwise confidence intervals.
//! * [`bias_lab`]: closed-form plug-in bias versus Monte-Carlo plug-in limits.
//! * [`sim`]: data-generating processes and the RMSE/coverage benchmark.

pub mod bias_lab;
pub mod data;
pub mod error;
pub mod estimators;
pub mod identification;
pub mod learners;
pub mod sim;

pub use data::{ObservedCell, SampleTable, Stratum};
pub use error::{CpceError, Result};
