//! Stochastic gradient Langevin dynamics with a cyclical cosine step size.
//!
//! One cycle of `iters_per_cycle` iterations starts at `alpha0` and decays to
//! nearly zero:
//!
//! ```text
//! alpha_i = alpha0 / 2 * (cos(pi * ((i - 1) mod K) / K) + 1),   K = ceil(I / cycles)
//! ```
//!
//! The large early steps explore; the final epochs of each cycle, run at small
//! steps, are the sampling phase.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::nnet::{ModelSpec, ParamVector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    alpha0: f64,
    total_iters: usize,
    cycles: usize,
}

impl StepSchedule {
    pub fn new(alpha0: f64, total_iters: usize, cycles: usize) -> Result<Self> {
        if !(alpha0.is_finite() && alpha0 > 0.0) {
            return Err(Error::Config(format!("alpha0 must be finite and > 0, got {alpha0}")));
        }
        if cycles == 0 || total_iters == 0 {
            return Err(Error::Config("cycles and total_iters must be >= 1".into()));
        }
        if cycles > total_iters {
            return Err(Error::Config(format!(
                "cycles ({cycles}) cannot exceed total iterations ({total_iters})"
            )));
        }
        Ok(Self {
            alpha0,
            total_iters,
            cycles,
        })
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    pub fn total_iters(&self) -> usize {
        self.total_iters
    }

    pub fn cycles(&self) -> usize {
        self.cycles
    }

    pub fn iters_per_cycle(&self) -> usize {
        self.total_iters.div_ceil(self.cycles)
    }

    /// Step size at 1-based iteration `i`.
    pub fn stepsize(&self, i: usize) -> Result<f64> {
        if i == 0 || i > self.total_iters {
            return Err(Error::Usage(format!(
                "iteration {i} outside 1..={}",
                self.total_iters
            )));
        }
        let k = self.iters_per_cycle();
        let pos = ((i - 1) % k) as f64 / k as f64;
        Ok(self.alpha0 / 2.0 * ((std::f64::consts::PI * pos).cos() + 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Scales the injected noise variance; 1 is standard SGLD, 0 turns the
    /// update into deterministic (momentum) SGD.
    pub temperature: f64,
    pub momentum: f64,
}

impl NoiseConfig {
    pub fn new(temperature: f64, momentum: f64) -> Result<Self> {
        let cfg = Self {
            temperature,
            momentum,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::Config(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseTag {
    Exploration,
    Sampling,
}

impl std::fmt::Display for PhaseTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PhaseTag::Exploration => "exploration",
            PhaseTag::Sampling => "sampling",
        })
    }
}

/// The last `sampling_len` epochs of a cycle sample; the rest explore.
pub fn phase(epoch_in_cycle: usize, epochs_per_cycle: usize, sampling_len: usize) -> Result<PhaseTag> {
    if sampling_len == 0 || sampling_len > epochs_per_cycle {
        return Err(Error::Usage(format!(
            "sampling_len must lie in 1..={epochs_per_cycle}, got {sampling_len}"
        )));
    }
    if epoch_in_cycle >= epochs_per_cycle {
        return Err(Error::Usage(format!(
            "epoch {epoch_in_cycle} outside a {epochs_per_cycle}-epoch cycle"
        )));
    }
    Ok(if epoch_in_cycle >= epochs_per_cycle - sampling_len {
        PhaseTag::Sampling
    } else {
        PhaseTag::Exploration
    })
}

/// Heavy-ball momentum buffer carried between SGLD steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SgldState {
    buffer: Vec<f64>,
}

impl SgldState {
    pub fn new(n_params: usize) -> Self {
        Self {
            buffer: vec![0.0; n_params],
        }
    }

    pub fn buffer(&self) -> &[f64] {
        &self.buffer
    }
}

/// First non-finite gradient coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonFinite {
    pub index: usize,
    pub value: f64,
}

impl NonFinite {
    /// Attach iteration and layer information for the abort message.
    pub fn into_error(self, spec: &ModelSpec, iteration: usize) -> Error {
        Error::Diverged {
            iteration,
            what: "gradient",
            layer: spec.layer_of(self.index),
            index: self.index,
            value: self.value,
        }
    }
}

/// One SGLD update, in place:
///
/// ```text
/// buffer <- momentum * buffer + grad
/// theta  <- theta - alpha * buffer + eta,   eta ~ N(0, 2 * alpha * temperature)
/// ```
///
/// Nothing is drawn from `rng` when the temperature is zero. Parameters are
/// left untouched if the gradient has a non-finite coordinate.
pub fn sgld_step<R: Rng + ?Sized>(
    params: &mut ParamVector,
    grad: &ParamVector,
    alpha: f64,
    noise: &NoiseConfig,
    state: &mut SgldState,
    rng: &mut R,
) -> std::result::Result<(), SgldError> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(SgldError::Usage(format!("step size must be > 0, got {alpha}")));
    }
    if params.len() != grad.len() || state.buffer.len() != params.len() {
        return Err(SgldError::Usage(format!(
            "length mismatch: params {}, grad {}, momentum buffer {}",
            params.len(),
            grad.len(),
            state.buffer.len()
        )));
    }
    if let Some(index) = grad.as_slice().iter().position(|g| !g.is_finite()) {
        return Err(SgldError::NonFinite(NonFinite {
            index,
            value: grad.as_slice()[index],
        }));
    }
    let m = noise.momentum;
    for (b, &g) in state.buffer.iter_mut().zip(grad.as_slice()) {
        *b = m * *b + g;
    }
    let theta = params.as_mut_slice();
    for (t, &b) in theta.iter_mut().zip(&state.buffer) {
        *t -= alpha * b;
    }
    if noise.temperature > 0.0 {
        let scale = (2.0 * alpha * noise.temperature).sqrt();
        for t in theta.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *t += scale * z;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum SgldError {
    Usage(String),
    NonFinite(NonFinite),
}

impl SgldError {
    pub fn into_error(self, spec: &ModelSpec, iteration: usize) -> Error {
        match self {
            SgldError::Usage(msg) => Error::Usage(msg),
            SgldError::NonFinite(nf) => nf.into_error(spec, iteration),
        }
    }
}
