//! Uncertainty-weighted cross entropy: each sample's loss is scaled by
//! `(1 + sigma_true)^kappa`, where `sigma_true` is the epistemic sigma of its
//! true class. `kappa = 0` recovers the plain loss.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Grid searched by the kappa sweep when none is given.
pub const DEFAULT_KAPPA_GRID: [f64; 7] = [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Kappa(f64);

impl Kappa {
    pub const ZERO: Kappa = Kappa(0.0);

    pub fn new(value: f64) -> Result<Self> {
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::Config(format!("kappa must be finite and >= 0, got {value}")));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Kappa {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Kappa::new(v)
    }
}

impl From<Kappa> for f64 {
    fn from(k: Kappa) -> f64 {
        k.0
    }
}

impl std::fmt::Display for Kappa {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// `(1 + sigma_true)^kappa`.
pub fn weight(sigma_true: f64, kappa: Kappa) -> Result<f64> {
    if !(0.0..=0.5).contains(&sigma_true) {
        return Err(Error::Usage(format!(
            "sigma {sigma_true} outside [0, 0.5]; the uncertainty table is corrupt"
        )));
    }
    if kappa.0 == 0.0 {
        return Ok(1.0);
    }
    Ok((1.0 + sigma_true).powf(kappa.0))
}

/// `1/B * sum_i losses[i] * weights[i]`.
pub fn weighted_batch_loss(losses: &[f64], weights: &[f64]) -> Result<f64> {
    if losses.len() != weights.len() {
        return Err(Error::Usage(format!(
            "{} losses but {} weights",
            losses.len(),
            weights.len()
        )));
    }
    if losses.is_empty() {
        return Err(Error::Usage("empty minibatch".into()));
    }
    if losses.iter().chain(weights).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Usage("losses and weights must be finite and nonnegative".into()));
    }
    let total: f64 = losses.iter().zip(weights).map(|(l, w)| l * w).sum();
    Ok(total / losses.len() as f64)
}

/// Sort and drop duplicate grid entries.
pub fn dedup_grid(grid: &[Kappa]) -> Vec<Kappa> {
    let mut out = grid.to_vec();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out.dedup();
    out
}
