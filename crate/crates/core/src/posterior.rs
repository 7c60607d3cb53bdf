//! Posterior draws, their per-sample predictive distributions over the training
//! set, and the per-sample epistemic uncertainty derived from them.
//!
//! For one cycle with draws `theta_1..theta_T`:
//!
//! ```text
//! mu_i    = 1/T * sum_j p(y | x_i, theta_j)
//! sigma_i = sqrt(1/T * sum_j (p(y | x_i, theta_j) - mu_i)^2)      (per class)
//! ```
//!
//! Predictions are kept only until the cycle's [`UncertaintyTable`] is built;
//! after that they are purged and the table answers sigma queries.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::nnet::{forward, Matrix, ModelSpec, ParamVector, PredictiveDistribution};
use crate::{Error, Result};

/// Default cap on the prediction log (4 GiB).
pub const DEFAULT_MAX_LOG_BYTES: usize = 4 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraw {
    pub draw_id: usize,
    pub cycle_index: usize,
    pub epoch_of_capture: usize,
    pub params: ParamVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyTable {
    cycle_index: usize,
    n_classes: usize,
    labels: Vec<usize>,
    /// Row-major `[n_samples x n_classes]`.
    sigma: Vec<f64>,
}

impl UncertaintyTable {
    pub fn new(cycle_index: usize, n_classes: usize, labels: Vec<usize>, sigma: Vec<f64>) -> Result<Self> {
        if sigma.len() != labels.len() * n_classes {
            return Err(Error::Schema(format!(
                "uncertainty table for {} samples x {n_classes} classes has {} values",
                labels.len(),
                sigma.len()
            )));
        }
        if labels.iter().any(|&y| y >= n_classes) {
            return Err(Error::Schema("uncertainty table label out of range".into()));
        }
        if let Some(s) = sigma.iter().find(|s| !(0.0..=0.5).contains(*s)) {
            return Err(Error::Schema(format!("sigma {s} outside [0, 0.5]")));
        }
        Ok(Self {
            cycle_index,
            n_classes,
            labels,
            sigma,
        })
    }

    pub fn cycle_index(&self) -> usize {
        self.cycle_index
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sigma(&self, sample_id: usize) -> &[f64] {
        &self.sigma[sample_id * self.n_classes..(sample_id + 1) * self.n_classes]
    }

    /// Sigma of the sample's true class.
    pub fn sigma_true(&self, sample_id: usize) -> f64 {
        self.sigma(sample_id)[self.labels[sample_id]]
    }

    pub fn sigma_true_all(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.sigma_true(i)).collect()
    }

    pub(crate) fn raw_sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Debug export: `sample_id,true_class,sigma_true,sigma_0..sigma_{C-1}`.
    ///
    /// `sample_ids` maps table rows to external ids; row indices are used when
    /// it is `None`.
    pub fn write_csv<W: Write>(&self, mut out: W, sample_ids: Option<&[u64]>) -> std::io::Result<()> {
        write!(out, "sample_id,true_class,sigma_true")?;
        for c in 0..self.n_classes {
            write!(out, ",sigma_{c}")?;
        }
        writeln!(out)?;
        for i in 0..self.len() {
            let id = sample_ids.map_or(i as u64, |ids| ids[i]);
            write!(out, "{id},{},{}", self.labels[i], self.sigma_true(i))?;
            for s in self.sigma(i) {
                write!(out, ",{s}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LoggedDraw {
    draw_id: usize,
    cycle: usize,
    /// Row-major `[n_samples x n_classes]`.
    probs: Vec<f64>,
}

/// Owns the prediction log and the uncertainty tables built from it.
#[derive(Debug, Clone)]
pub struct PosteriorBank {
    n_classes: usize,
    labels: Vec<usize>,
    log: Vec<LoggedDraw>,
    tables: BTreeMap<usize, UncertaintyTable>,
    purged: BTreeSet<usize>,
    max_log_bytes: usize,
}

impl PosteriorBank {
    /// `labels` are the true classes of the training set, indexed by sample id.
    pub fn new(labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Config(format!("label {y} out of range for {n_classes} classes")));
        }
        Ok(Self {
            n_classes,
            labels,
            log: Vec::new(),
            tables: BTreeMap::new(),
            purged: BTreeSet::new(),
            max_log_bytes: DEFAULT_MAX_LOG_BYTES,
        })
    }

    pub fn with_max_log_bytes(mut self, bytes: usize) -> Self {
        self.max_log_bytes = bytes;
        self
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Number of stored probability vectors (draws x samples).
    pub fn log_entries(&self) -> usize {
        self.log.len() * self.n_samples()
    }

    pub fn draws_logged(&self, cycle: usize) -> usize {
        self.log.iter().filter(|d| d.cycle == cycle).count()
    }

    /// Forward every training sample through `draw` and log the results.
    pub fn record_predictions(&mut self, draw: &PosteriorDraw, spec: &ModelSpec, features: &Matrix) -> Result<()> {
        if features.rows() != self.n_samples() {
            return Err(Error::Config(format!(
                "training set has {} rows, bank expects {}",
                features.rows(),
                self.n_samples()
            )));
        }
        let probs = forward(&draw.params, spec, features)?;
        self.record_probabilities(draw.draw_id, draw.cycle_index, probs)
    }

    /// Log precomputed probabilities for one draw.
    pub fn record_probabilities(&mut self, draw_id: usize, cycle: usize, probs: Matrix) -> Result<()> {
        if probs.rows() != self.n_samples() || probs.cols() != self.n_classes {
            return Err(Error::Config(format!(
                "prediction matrix is {}x{}, expected {}x{}",
                probs.rows(),
                probs.cols(),
                self.n_samples(),
                self.n_classes
            )));
        }
        if self.tables.contains_key(&cycle) {
            return Err(Error::State(format!(
                "cycle {cycle} is closed: its uncertainty table is already built"
            )));
        }
        if self.log.iter().any(|d| d.draw_id == draw_id) {
            return Err(Error::State(format!("draw {draw_id} is already logged")));
        }
        for r in 0..probs.rows() {
            let row = probs.row(r);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p))
                || (sum - 1.0).abs() > PredictiveDistribution::SUM_TOLERANCE
            {
                return Err(Error::Usage(format!(
                    "row {r} of draw {draw_id} is not a probability distribution"
                )));
            }
        }

        let bytes_per_draw = self.n_samples() * self.n_classes * std::mem::size_of::<f64>();
        let needed = (self.log.len() + 1).saturating_mul(bytes_per_draw);
        if needed > self.max_log_bytes {
            return Err(Error::Storage(format!(
                "prediction log would need {needed} bytes ({} draws x {} samples x {} classes), cap is {}",
                self.log.len() + 1,
                self.n_samples(),
                self.n_classes,
                self.max_log_bytes
            )));
        }
        self.log.try_reserve(1).map_err(|e| {
            Error::Storage(format!("cannot grow prediction log for draw {draw_id}: {e}"))
        })?;
        self.log.push(LoggedDraw {
            draw_id,
            cycle,
            probs: probs.into_vec(),
        });
        Ok(())
    }

    fn cycle_draws(&self, cycle: usize) -> Vec<&LoggedDraw> {
        self.log.iter().filter(|d| d.cycle == cycle).collect()
    }

    fn check_sample(&self, sample_id: usize) -> Result<()> {
        if sample_id >= self.n_samples() {
            return Err(Error::Usage(format!(
                "sample {sample_id} outside training set of {}",
                self.n_samples()
            )));
        }
        Ok(())
    }

    fn logged_rows(&self, cycle: usize, sample_id: usize) -> Result<Vec<&[f64]>> {
        self.check_sample(sample_id)?;
        let c = self.n_classes;
        let rows: Vec<&[f64]> = self
            .cycle_draws(cycle)
            .into_iter()
            .map(|d| &d.probs[sample_id * c..(sample_id + 1) * c])
            .collect();
        if rows.is_empty() {
            return Err(Error::State(format!("no predictions logged for cycle {cycle}")));
        }
        Ok(rows)
    }

    /// Mean predictive distribution of `sample_id` over the cycle's logged draws.
    pub fn predictive_mean(&self, cycle: usize, sample_id: usize) -> Result<Vec<f64>> {
        let rows = self.logged_rows(cycle, sample_id)?;
        Ok(mean_rows(&rows, self.n_classes))
    }

    /// Per-class population standard deviation across the cycle's draws. Served
    /// from the uncertainty table once the cycle's predictions are purged.
    pub fn epistemic_sigma(&self, cycle: usize, sample_id: usize) -> Result<Vec<f64>> {
        self.check_sample(sample_id)?;
        if self.purged.contains(&cycle) {
            let table = self.tables.get(&cycle).expect("purge requires a table");
            return Ok(table.sigma(sample_id).to_vec());
        }
        let rows = self.logged_rows(cycle, sample_id)?;
        Ok(std_rows(&rows, self.n_classes))
    }

    /// Compute sigma for every training sample from the cycle's draws.
    pub fn build_table(&mut self, cycle: usize) -> Result<&UncertaintyTable> {
        let draws = self.cycle_draws(cycle);
        if draws.is_empty() {
            return Err(Error::State(format!(
                "cannot build uncertainty table for cycle {cycle}: no logged draws"
            )));
        }
        let c = self.n_classes;
        let mut sigma = Vec::with_capacity(self.n_samples() * c);
        let mut rows: Vec<&[f64]> = Vec::with_capacity(draws.len());
        for i in 0..self.n_samples() {
            rows.clear();
            rows.extend(draws.iter().map(|d| &d.probs[i * c..(i + 1) * c]));
            sigma.extend(std_rows(&rows, c));
        }
        let table = UncertaintyTable::new(cycle, c, self.labels.clone(), sigma)?;
        self.tables.insert(cycle, table);
        Ok(&self.tables[&cycle])
    }

    /// Free the cycle's predictions. A second call is a no-op.
    pub fn purge_predictions(&mut self, cycle: usize) -> Result<()> {
        if !self.tables.contains_key(&cycle) {
            return Err(Error::State(format!(
                "cannot purge cycle {cycle} before its uncertainty table is built"
            )));
        }
        if self.purged.insert(cycle) {
            self.log.retain(|d| d.cycle != cycle);
            self.log.shrink_to_fit();
        }
        Ok(())
    }

    pub fn table(&self, cycle: usize) -> Option<&UncertaintyTable> {
        self.tables.get(&cycle)
    }

    pub fn latest_table(&self) -> Option<&UncertaintyTable> {
        self.tables.values().next_back()
    }
}

fn mean_rows(rows: &[&[f64]], c: usize) -> Vec<f64> {
    let t = rows.len() as f64;
    let mut mu = vec![0.0; c];
    for r in rows {
        for (m, &p) in mu.iter_mut().zip(r.iter()) {
            *m += p;
        }
    }
    for m in &mut mu {
        *m /= t;
    }
    mu
}

/// Two-pass population standard deviation per column.
fn std_rows(rows: &[&[f64]], c: usize) -> Vec<f64> {
    let mu = mean_rows(rows, c);
    let t = rows.len() as f64;
    let mut var = vec![0.0; c];
    for r in rows {
        for ((v, &p), &m) in var.iter_mut().zip(r.iter()).zip(&mu) {
            *v += (p - m) * (p - m);
        }
    }
    (0..c)
        .map(|k| {
            // the mean of identical values can round away from them
            if rows.iter().all(|r| r[k] == rows[0][k]) {
                0.0
            } else {
                (var[k] / t).sqrt().min(0.5)
            }
        })
        .collect()
}
