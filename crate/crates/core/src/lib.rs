//! Desk-scale intermittent-demand forecasting: a switch-routed transformer
//! encoder with a hurdle negative-binomial head, trained by reverse-mode
//! autodiff on an f64 tape, plus classical baselines, retail metrics, and
//! expert-routing analysis.

pub mod data;
pub mod error;
pub mod eval;
pub mod hurdle;
pub mod model;
pub mod rng;
pub mod routing;
pub mod special;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
