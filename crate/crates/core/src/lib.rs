//! Cyclical SGLD training of small classifiers, epistemic uncertainty from
//! posterior draws, an uncertainty-weighted loss, and fairness auditing on
//! synthetic attribute-skewed data.

pub mod archive;
pub mod data;
pub mod error;
pub mod fairness;
pub mod io;
pub mod nnet;
pub mod posterior;
pub mod rng;
pub mod sgmcmc;
pub mod trainer;
pub mod weighted_loss;

pub use error::{Error, Result};
