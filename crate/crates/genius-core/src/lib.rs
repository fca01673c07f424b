//! Heteroscedasticity-based instrumental-variable estimation (the MR GENIUS
//! family): estimators that stay consistent when candidate instruments
//! violate the exclusion restriction, with stacked-moment sandwich
//! inference, survival and link-scale extensions, comparison baselines,
//! and a reproducible Monte Carlo harness.

pub mod additive;
pub mod baselines;
pub mod data;
pub mod error;
pub mod inference;
pub mod link;
pub mod nuisance;
pub mod numeric;
mod parallel;
pub mod sim;
pub mod survival;

pub use error::{Error, Result};
