//! Cyclical SGLD training loop with per-cycle uncertainty refresh.
//!
//! Per cycle `c` and epoch `e`:
//!
//! * sampling epoch: snapshot the parameters at epoch start, log the
//!   snapshot's training-set predictions, then update with the plain loss;
//! * exploration epoch with `c > 0` (weighted mode): update with the loss
//!   weighted by `(1 + sigma_true)^kappa` from cycle `c - 1`'s table;
//! * exploration epoch in cycle 0: plain loss.
//!
//! Each cycle ends by building its uncertainty table and purging the logged
//! predictions. Updates use the potential
//! `U(theta) = N * mean_batch_loss + prior_precision / 2 * |theta|^2`, so a
//! temperature of 1 targets the Bayesian posterior under a Gaussian prior.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Attribute, Dataset};
use crate::fairness::{accuracy, EvalRecord, FairnessReport};
use crate::nnet::{self, forward, Activation, Matrix, Minibatch, ModelSpec, ParamVector, PROB_FLOOR};
use crate::posterior::{PosteriorBank, PosteriorDraw, UncertaintyTable};
use crate::rng;
use crate::sgmcmc::{phase, sgld_step, NoiseConfig, PhaseTag, SgldState, StepSchedule};
use crate::weighted_loss::{dedup_grid, weight, Kappa};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Deterministic SGD with momentum; one final draw, no uncertainty.
    BaselineSgd,
    BayesUnweighted,
    BayesWeighted,
}

impl Mode {
    pub fn is_bayesian(self) -> bool {
        !matches!(self, Mode::BaselineSgd)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::BaselineSgd => "baseline_sgd",
            Mode::BayesUnweighted => "bayes_unweighted",
            Mode::BayesWeighted => "bayes_weighted",
        })
    }
}

fn default_sampling_len() -> usize {
    5
}

fn default_temperature() -> f64 {
    1.0
}

fn default_prior_precision() -> f64 {
    1.0
}

/// Everything a training run needs. Dataset paths are only read by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub alpha0: f64,
    pub cycles: usize,
    pub epochs_per_cycle: usize,
    #[serde(default = "default_sampling_len")]
    pub sampling_len: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_prior_precision")]
    pub prior_precision: f64,
    #[serde(default)]
    pub kappa: f64,
    pub batch_size: usize,
    pub seed: u64,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_untouched_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_transformed_path: Option<PathBuf>,
    /// Optional hex SHA-256 pin for the training file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_sha256: Option<String>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::new(self.layer_sizes.clone(), self.activation)
    }

    pub fn kappa(&self) -> Result<Kappa> {
        Kappa::new(self.kappa)
    }

    /// Noise settings actually used; the baseline never injects noise.
    pub fn noise(&self) -> Result<NoiseConfig> {
        let t = if self.mode.is_bayesian() { self.temperature } else { 0.0 };
        NoiseConfig::new(t, self.momentum)
    }

    pub fn batches_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    pub fn schedule(&self, n_train: usize) -> Result<StepSchedule> {
        let total = self.cycles * self.epochs_per_cycle * self.batches_per_epoch(n_train);
        StepSchedule::new(self.alpha0, total, self.cycles)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec()?;
        self.kappa()?;
        self.noise()?;
        if self.cycles == 0 || self.epochs_per_cycle == 0 || self.batch_size == 0 {
            return Err(Error::Config("cycles, epochs_per_cycle and batch_size must be >= 1".into()));
        }
        if self.mode.is_bayesian() && !(1..=self.epochs_per_cycle).contains(&self.sampling_len) {
            return Err(Error::Config(format!(
                "sampling_len must lie in 1..={}, got {}",
                self.epochs_per_cycle, self.sampling_len
            )));
        }
        if !(self.prior_precision.is_finite() && self.prior_precision >= 0.0) {
            return Err(Error::Config("prior_precision must be finite and >= 0".into()));
        }
        if !(self.alpha0.is_finite() && self.alpha0 > 0.0) {
            return Err(Error::Config(format!("alpha0 must be finite and > 0, got {}", self.alpha0)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cycle: usize,
    pub phase: PhaseTag,
    /// Mean unweighted cross entropy over the epoch's samples.
    pub mean_loss: f64,
    /// Mean per-sample loss weight (1 outside weighted epochs).
    pub mean_weight: f64,
    /// Step size at the epoch's first iteration.
    pub lr: f64,
}

pub const HISTORY_HEADER: &str = "epoch,cycle,phase,mean_loss,mean_weight,lr";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.cycle, self.phase, self.mean_loss, self.mean_weight, self.lr
        )
    }
}

/// Weights implied by one cycle's uncertainty table over the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleWeightStats {
    pub cycle: usize,
    pub mean_sigma_true: f64,
    pub mean_weight: f64,
    pub max_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedEnsemble {
    pub spec: ModelSpec,
    pub config: RunConfig,
    pub draws: Vec<PosteriorDraw>,
    /// Table of the final cycle (Bayesian modes).
    pub table: Option<UncertaintyTable>,
    pub history: Vec<EpochRecord>,
    pub weight_stats: Vec<CycleWeightStats>,
}

impl TrainedEnsemble {
    /// Final parameters: the last retained draw.
    pub fn final_params(&self) -> &ParamVector {
        &self.draws.last().expect("ensembles are nonempty").params
    }
}

/// Run `config` on `train`.
pub fn train(config: &RunConfig, train: &Dataset) -> Result<TrainedEnsemble> {
    train_observed(config, train, &mut |_| {}, &mut |_, _| {})
}

/// As [`train`], reporting every finished epoch and every SGLD iteration
/// (`iteration`, parameters after the step). Epoch records already reported
/// stay valid if the run later aborts.
pub fn train_observed(
    config: &RunConfig,
    train: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochRecord),
    on_step: &mut dyn FnMut(usize, &ParamVector),
) -> Result<TrainedEnsemble> {
    config.validate()?;
    let spec = config.model_spec()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if spec.input_dim() != train.n_features || spec.n_classes() != train.n_classes {
        return Err(Error::Config(format!(
            "model {:?} does not fit data with {} features and {} classes",
            spec.layer_sizes(),
            train.n_features,
            train.n_classes
        )));
    }
    let n = train.len();
    let schedule = config.schedule(n)?;
    let noise = config.noise()?;
    let kappa = config.kappa()?;
    let bayes = config.mode.is_bayesian();
    let weighted = config.mode == Mode::BayesWeighted;

    let features = train.features();
    let labels = train.labels();
    let mut params = spec.init_params(&mut rng::stream(config.seed, rng::INIT));
    let mut shuffle_rng = rng::stream(config.seed, rng::SHUFFLE);
    let mut noise_rng = rng::stream(config.seed, rng::NOISE);
    let mut state = SgldState::new(spec.n_params());
    let mut bank = PosteriorBank::new(labels.clone(), spec.n_classes())?;

    let mut draws = Vec::new();
    let mut history = Vec::new();
    let mut weight_stats = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad_u = vec![0.0; spec.n_params()];
    let mut iteration = 0usize;

    for cycle in 0..config.cycles {
        for e in 0..config.epochs_per_cycle {
            let epoch = cycle * config.epochs_per_cycle + e;
            let tag = if bayes {
                phase(e, config.epochs_per_cycle, config.sampling_len)?
            } else {
                PhaseTag::Exploration
            };
            if bayes && tag == PhaseTag::Sampling {
                let draw = PosteriorDraw {
                    draw_id: draws.len(),
                    cycle_index: cycle,
                    epoch_of_capture: epoch,
                    params: params.clone(),
                };
                bank.record_predictions(&draw, &spec, &features)?;
                draws.push(draw);
            }
            let table = if weighted && tag == PhaseTag::Exploration && cycle > 0 {
                Some(bank.table(cycle - 1).ok_or_else(|| {
                    Error::State(format!("uncertainty table for cycle {} is missing", cycle - 1))
                })?)
            } else {
                None
            };

            order.shuffle(&mut shuffle_rng);
            let lr = schedule.stepsize(iteration + 1)?;
            let (mut loss_sum, mut weight_sum) = (0.0, 0.0);
            for chunk in order.chunks(config.batch_size) {
                iteration += 1;
                let alpha = schedule.stepsize(iteration)?;
                let batch = Minibatch::new(
                    features.select_rows(chunk),
                    chunk.iter().map(|&i| labels[i]).collect(),
                    chunk.to_vec(),
                    spec.n_classes(),
                )?;
                let weights = match table {
                    Some(t) => chunk
                        .iter()
                        .map(|&i| weight(t.sigma_true(i), kappa))
                        .collect::<Result<Vec<_>>>()?,
                    None => vec![1.0; chunk.len()],
                };
                let (losses, grad) = nnet::loss_and_gradient(&params, &spec, &batch, &weights)?;
                if let Some(k) = losses.iter().position(|l| !l.is_finite()) {
                    return Err(Error::Diverged {
                        iteration,
                        what: "loss",
                        layer: spec.n_layers() - 1,
                        index: chunk[k],
                        value: losses[k],
                    });
                }
                loss_sum += losses.iter().sum::<f64>();
                weight_sum += weights.iter().sum::<f64>();

                let scale = n as f64;
                for ((gu, &g), &t) in grad_u.iter_mut().zip(grad.as_slice()).zip(params.as_slice()) {
                    *gu = scale * g + config.prior_precision * t;
                }
                let g = ParamVector::from_raw(std::mem::take(&mut grad_u));
                let res = sgld_step(&mut params, &g, alpha, &noise, &mut state, &mut noise_rng);
                grad_u = g.into_values();
                res.map_err(|e| e.into_error(&spec, iteration))?;
                if let Some(k) = params.as_slice().iter().position(|v| !v.is_finite()) {
                    return Err(Error::Diverged {
                        iteration,
                        what: "parameter",
                        layer: spec.layer_of(k),
                        index: k,
                        value: params.as_slice()[k],
                    });
                }
                on_step(iteration, &params);
            }
            let record = EpochRecord {
                epoch,
                cycle,
                phase: tag,
                mean_loss: loss_sum / n as f64,
                mean_weight: weight_sum / n as f64,
                lr,
            };
            on_epoch(&record);
            history.push(record);
        }
        if bayes {
            let table = bank.build_table(cycle)?;
            let sig = table.sigma_true_all();
            let w = sig.iter().map(|&s| weight(s, kappa)).collect::<Result<Vec<_>>>()?;
            weight_stats.push(CycleWeightStats {
                cycle,
                mean_sigma_true: sig.iter().sum::<f64>() / n as f64,
                mean_weight: w.iter().sum::<f64>() / n as f64,
                max_weight: w.iter().cloned().fold(1.0, f64::max),
            });
            bank.purge_predictions(cycle)?;
        }
    }

    if !bayes {
        draws.push(PosteriorDraw {
            draw_id: 0,
            cycle_index: config.cycles - 1,
            epoch_of_capture: config.cycles * config.epochs_per_cycle,
            params,
        });
    }
    let table = if bayes { bank.table(config.cycles - 1).cloned() } else { None };
    Ok(TrainedEnsemble {
        spec,
        config: config.clone(),
        draws,
        table,
        history,
        weight_stats,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub predicted: Vec<usize>,
    /// `[n x C]` mean over draws.
    pub mean: Matrix,
    /// `[n x C]` population std over draws.
    pub sigma: Matrix,
}

/// Average every draw's forward pass; predict the argmax (lowest index on ties).
pub fn predict_ensemble(ensemble: &TrainedEnsemble, features: &Matrix) -> Result<EnsemblePrediction> {
    predict_draws(&ensemble.spec, &ensemble.draws, features)
}

pub fn predict_draws(spec: &ModelSpec, draws: &[PosteriorDraw], features: &Matrix) -> Result<EnsemblePrediction> {
    if draws.is_empty() {
        return Err(Error::Usage("ensemble has no draws".into()));
    }
    if features.cols() != spec.input_dim() {
        return Err(Error::Usage(format!(
            "features have {} columns, model expects {}",
            features.cols(),
            spec.input_dim()
        )));
    }
    let (n, c) = (features.rows(), spec.n_classes());
    let t = draws.len() as f64;
    let outs = draws
        .iter()
        .map(|d| forward(&d.params, spec, features))
        .collect::<Result<Vec<_>>>()?;
    let mut mean = Matrix::zeros(n, c);
    for o in &outs {
        for (m, &p) in mean.as_mut_slice().iter_mut().zip(o.as_slice()) {
            *m += p;
        }
    }
    for m in mean.as_mut_slice() {
        *m /= t;
    }
    let mut sigma = Matrix::zeros(n, c);
    for o in &outs {
        for ((s, &p), &m) in sigma.as_mut_slice().iter_mut().zip(o.as_slice()).zip(mean.as_slice()) {
            *s += (p - m) * (p - m);
        }
    }
    for s in sigma.as_mut_slice() {
        *s = (*s / t).sqrt();
    }
    let predicted = (0..n).map(|i| nnet::argmax(mean.row(i))).collect();
    Ok(EnsemblePrediction { predicted, mean, sigma })
}

/// Mean negative log of the ensemble's probability for the true class.
pub fn ensemble_nll(ensemble: &TrainedEnsemble, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("cannot score an empty dataset".into()));
    }
    let pred = predict_ensemble(ensemble, &data.features())?;
    let total: f64 = data
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| -pred.mean.row(i)[s.label].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / data.len() as f64)
}

/// Prediction records for every sample of every given test set.
pub fn eval_records(ensemble: &TrainedEnsemble, test_sets: &[&Dataset]) -> Result<Vec<EvalRecord>> {
    let mut records = Vec::new();
    for ds in test_sets {
        let pred = predict_ensemble(ensemble, &ds.features())?;
        for (s, &p) in ds.samples.iter().zip(&pred.predicted) {
            let r = EvalRecord::new(s.label, p, s.attribute);
            records.push(match s.subgroup {
                Some(g) => r.with_subgroup(g),
                None => r,
            });
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: FairnessReport,
    /// Pooled accuracy (= mean TPR on balanced test sets) over all test records.
    pub overall_tpr: f64,
}

/// Fairness report over an untouched and a fully transformed test set.
pub fn evaluate(ensemble: &TrainedEnsemble, test_untouched: &Dataset, test_transformed: &Dataset) -> Result<Evaluation> {
    test_untouched.check_compatible(test_transformed)?;
    let records = eval_records(ensemble, &[test_untouched, test_transformed])?;
    let overall_tpr = accuracy(&records).ok_or_else(|| Error::Usage("test sets are empty".into()))?;
    Ok(Evaluation {
        report: FairnessReport::from_records(&records, ensemble.spec.n_classes()),
        overall_tpr,
    })
}

/// Composition of the training samples with the highest 10% true-class sigma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileComposition {
    pub n_samples: usize,
    pub n_top: usize,
    /// Samples whose attribute is the minority one within their class.
    pub minority_base_rate: f64,
    pub minority_top_rate: f64,
    pub transformed_base_rate: f64,
    pub transformed_top_rate: f64,
}

impl DecileComposition {
    pub fn minority_ratio(&self) -> f64 {
        self.minority_top_rate / self.minority_base_rate
    }
}

pub fn top_decile_composition(table: &UncertaintyTable, train: &Dataset) -> Result<DecileComposition> {
    if table.len() != train.len() {
        return Err(Error::Schema(format!(
            "uncertainty table covers {} samples, training set has {}",
            table.len(),
            train.len()
        )));
    }
    let n = train.len();
    let n_top = n.div_ceil(10);
    let sig = table.sigma_true_all();
    let mut idx: Vec<usize> = (0..n).collect();
    // stable: ties keep dataset order
    idx.sort_by(|&a, &b| sig[b].total_cmp(&sig[a]));
    let minority = train.in_class_minority();
    let transformed: Vec<bool> = train.samples.iter().map(|s| s.attribute == Attribute::Transformed).collect();
    let rate = |flags: &[bool], ids: &[usize]| ids.iter().filter(|&&i| flags[i]).count() as f64 / ids.len() as f64;
    let all: Vec<usize> = (0..n).collect();
    let top = &idx[..n_top];
    Ok(DecileComposition {
        n_samples: n,
        n_top,
        minority_base_rate: rate(&minority, &all),
        minority_top_rate: rate(&minority, top),
        transformed_base_rate: rate(&transformed, &all),
        transformed_top_rate: rate(&transformed, top),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kappa: Kappa,
    pub val_loss: f64,
    pub overall_tpr: f64,
    pub report: FairnessReport,
}

pub const SWEEP_HEADER: &str = "kappa,val_loss,overall_tpr,mean_accuracy,bias_amplification,opportunity_gap,average_odds,tpr_gap";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.kappa,
            self.val_loss,
            self.overall_tpr,
            opt(self.report.mean_accuracy),
            opt(self.report.bias_amplification),
            opt(self.report.opportunity_gap),
            opt(self.report.average_odds),
            opt(self.report.tpr_gap)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// Successful runs in ascending kappa order.
    pub rows: Vec<SweepRow>,
    /// Kappa with the lowest validation loss among successful runs.
    pub best: Option<Kappa>,
    pub failures: Vec<(Kappa, String)>,
}

impl SweepReport {
    pub fn best_row(&self) -> Option<&SweepRow> {
        let best = self.best?;
        self.rows.iter().find(|r| r.kappa == best)
    }
}

/// Datasets used by a sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepData<'a> {
    pub train: &'a Dataset,
    pub validation: &'a Dataset,
    pub test_untouched: &'a Dataset,
    pub test_transformed: &'a Dataset,
}

/// One `bayes_weighted` run per distinct kappa, all with the base seed.
pub fn sweep_kappa(base: &RunConfig, grid: &[Kappa], data: SweepData<'_>) -> Result<SweepReport> {
    let grid = dedup_grid(grid);
    if grid.is_empty() {
        return Err(Error::Config("kappa grid is empty".into()));
    }
    if data.validation.is_empty() {
        return Err(Error::Config("sweep needs a nonempty validation set".into()));
    }
    let outcomes: Vec<(Kappa, Result<SweepRow>)> = grid
        .par_iter()
        .map(|&kappa| {
            let run = || -> Result<SweepRow> {
                let mut cfg = base.clone();
                cfg.mode = Mode::BayesWeighted;
                cfg.kappa = kappa.value();
                let ens = train(&cfg, data.train)?;
                let val_loss = ensemble_nll(&ens, data.validation)?;
                let eval = evaluate(&ens, data.test_untouched, data.test_transformed)?;
                Ok(SweepRow {
                    kappa,
                    val_loss,
                    overall_tpr: eval.overall_tpr,
                    report: eval.report,
                })
            };
            (kappa, run())
        })
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (kappa, outcome) in outcomes {
        match outcome {
            Ok(row) => rows.push(row),
            Err(e) => failures.push((kappa, e.to_string())),
        }
    }
    let best = rows
        .iter()
        .filter(|r| r.val_loss.is_finite())
        .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
        .map(|r| r.kappa);
    Ok(SweepReport { rows, best, failures })
}
