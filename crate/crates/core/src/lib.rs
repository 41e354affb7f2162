//! Tuning chi-squared residual detectors for discrete-time LTI systems whose
//! noises are modelled as Gaussian mixtures.
//!
//! The pipeline propagates measurement- and system-noise mixtures through a
//! Luenberger observer into a steady-state residual mixture
//! ([`residual::steady_state_residual`]), then maps detector thresholds to
//! false-alarm rates and back ([`detector::false_alarm_rate`],
//! [`detector::tune_threshold`]). [`mc`] provides Monte-Carlo ground truth.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod cli;
pub mod detector;
pub mod em;
pub mod error;
pub mod gmm;
pub mod linalg;
pub mod lti;
pub mod mc;
pub mod quadrature;
pub mod residual;
pub mod special;

pub use error::{Error, Result};
pub use gmm::{GaussianMode, Gmm, MergeRule, ReductionConfig};
pub use lti::LtiSystem;
pub use residual::{ReductionSpec, ResidualModel};
