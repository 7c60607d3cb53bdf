//! Acceptance suite. Runs every criterion, prints one `PASS`/`FAIL` line per
//! criterion and exits non-zero if any failed.
//!
//! Run with `cargo test -p debias-cli --test acceptance`. Set
//! `ACCEPTANCE_ONLY=1,3` to run a subset.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use debias_core::data::{build_experiment, Attribute, ExperimentData, SkewPlan, SyntheticSpec};
use debias_core::fairness::{
    average_odds_multiclass, bias_amplification, mean_attribute_accuracy, opportunity_gap, subgroup_tpr_table,
    EvalRecord,
};
use debias_core::nnet::{loss_and_gradient, Activation, Matrix, Minibatch, ModelSpec, ParamVector};
use debias_core::rng;
use debias_core::sgmcmc::{sgld_step, NoiseConfig, SgldState, StepSchedule};
use debias_core::trainer::{
    evaluate, sweep_kappa, top_decile_composition, train, train_observed, Evaluation, Mode, RunConfig, SweepData,
};
use debias_core::weighted_loss::{Kappa, DEFAULT_KAPPA_GRID};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("sgld recovers the conjugate gaussian posterior", sgld_self_test),
        ("cyclical schedule landmarks", schedule_landmarks),
        ("backward matches finite differences", gradient_check),
        ("kappa 0 trajectory equals unweighted", kappa_identity),
        ("fairness metrics match counting oracles", metric_oracles),
        ("minority samples concentrate in the top sigma decile", uncertainty_bias_correlation),
        ("weighting lowers bias on the sensitive scheme", sensitive_direction),
        ("weighting lowers the tpr gap on the minority scheme", minority_direction),
        ("overall tpr peaks at an interior kappa", sweep_shape),
        ("train reruns are byte identical", determinism),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let out = run();
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        if !out.pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {verdict}  {name}: {} [{:.1}s]",
            i + 1,
            out.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------- 1

/// `x_i ~ N(theta, 1)` with prior `theta ~ N(0, 1/lambda)`: the posterior is
/// `N(n * xbar / (n + lambda), 1 / (n + lambda))`.
fn sgld_self_test() -> Outcome {
    let start = Instant::now();
    let n = 100usize;
    let lambda = 1.0;
    let mut data_rng = rng::stream(11, "conjugate-data");
    let xs: Vec<f64> = (0..n).map(|_| 2.0 + data_rng.sample::<f64, _>(StandardNormal)).collect();
    let xbar = xs.iter().sum::<f64>() / n as f64;
    let precision = n as f64 + lambda;
    let post_mean = n as f64 * xbar / precision;
    let post_var = 1.0 / precision;

    let alpha = 0.02 / precision;
    let (burn_in, thin, keep) = (2_000, 200, 5_000);
    let noise = NoiseConfig::new(1.0, 0.0).unwrap();
    let mut state = SgldState::new(1);
    let mut theta = ParamVector::new(vec![0.0]).unwrap();
    let mut noise_rng = rng::stream(11, rng::NOISE);
    let mut draws = Vec::with_capacity(keep);
    for step in 1..=burn_in + thin * keep {
        let t = theta.as_slice()[0];
        let grad = ParamVector::new(vec![n as f64 * (t - xbar) + lambda * t]).unwrap();
        sgld_step(&mut theta, &grad, alpha, &noise, &mut state, &mut noise_rng).unwrap();
        if step > burn_in && (step - burn_in) % thin == 0 {
            draws.push(theta.as_slice()[0]);
        }
    }
    let m = draws.iter().sum::<f64>() / draws.len() as f64;
    let v = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / draws.len() as f64;
    let mean_err = ((m - post_mean) / post_mean).abs();
    let var_err = ((v - post_var) / post_var).abs();
    let elapsed = start.elapsed();
    Outcome::new(
        draws.len() == 5_000 && mean_err < 0.05 && var_err < 0.05 && elapsed < Duration::from_secs(10),
        format!(
            "{} draws, mean rel err {mean_err:.4}, variance rel err {var_err:.4} (< 0.05), {:.2}s (< 10s)",
            draws.len(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn schedule_landmarks() -> Outcome {
    let alpha0 = 0.37;
    let mut worst_formula = 0.0f64;
    let mut ok = true;
    let mut end_ratio = 0.0f64;
    for &(total, cycles) in &[(400usize, 4usize), (1000, 5), (1200, 3), (10_000, 7), (101, 1)] {
        let s = StepSchedule::new(alpha0, total, cycles).unwrap();
        let k = total.div_ceil(cycles);
        for i in 1..=total {
            let pos = ((i - 1) % k) as f64 / k as f64;
            let expect = 0.5 * alpha0 * (1.0 + (std::f64::consts::PI * pos).cos());
            worst_formula = worst_formula.max((s.stepsize(i).unwrap() - expect).abs());
        }
        for c in 0..cycles {
            let first = c * k + 1;
            if first > total {
                break;
            }
            ok &= (s.stepsize(first).unwrap() - alpha0).abs() <= 1e-12;
            if k % 2 == 0 && first + k / 2 <= total {
                ok &= (s.stepsize(first + k / 2).unwrap() - alpha0 / 2.0).abs() <= 1e-12;
            }
            let last = first + k - 1;
            if last <= total && k >= 100 {
                let r = s.stepsize(last).unwrap() / alpha0;
                end_ratio = end_ratio.max(r);
                ok &= r < 1e-3;
            }
        }
    }
    ok &= worst_formula <= 1e-12;
    Outcome::new(
        ok,
        format!("max |stepsize - formula| {worst_formula:.1e} (<= 1e-12), worst end/alpha0 {end_ratio:.2e} (< 1e-3)"),
    )
}

// ---------------------------------------------------------------- 3

fn weighted_mean_loss(params: &ParamVector, spec: &ModelSpec, batch: &Minibatch, w: &[f64]) -> f64 {
    let (losses, _) = loss_and_gradient(params, spec, batch, w).unwrap();
    losses.iter().zip(w).map(|(l, w)| l * w).sum::<f64>() / losses.len() as f64
}

fn gradient_check() -> Outcome {
    let h = 1e-5;
    let instances = 24;
    let mut worst = 0.0f64;
    let mut r = rng::stream(3, "gradient-check");
    for inst in 0..instances {
        let depth = r.random_range(1..=3);
        let mut sizes = vec![r.random_range(2..=6)];
        for _ in 0..depth {
            sizes.push(r.random_range(2..=7));
        }
        let activation = if inst % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let spec = ModelSpec::new(sizes.clone(), activation).unwrap();
        let n_classes = *sizes.last().unwrap();
        let b = r.random_range(1..=8);
        let rows: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..sizes[0]).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..n_classes)).collect();
        let weights: Vec<f64> = (0..b).map(|_| r.random_range(0.5..3.0)).collect();
        let batch = Minibatch::new(Matrix::from_rows(&rows).unwrap(), labels, (0..b).collect(), n_classes).unwrap();
        let values: Vec<f64> = (0..spec.n_params()).map(|_| 0.7 * r.sample::<f64, _>(StandardNormal)).collect();
        let params = ParamVector::from_values(&spec, values).unwrap();
        let (_, grad) = loss_and_gradient(&params, &spec, &batch, &weights).unwrap();
        for j in 0..spec.n_params() {
            let mut plus = params.clone();
            plus.as_mut_slice()[j] += h;
            let mut minus = params.clone();
            minus.as_mut_slice()[j] -= h;
            let fd = (weighted_mean_loss(&plus, &spec, &batch, &weights)
                - weighted_mean_loss(&minus, &spec, &batch, &weights))
                / (2.0 * h);
            let g = grad.as_slice()[j];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Outcome::new(
        worst < 1e-4,
        format!("{instances} random instances, max relative error {worst:.2e} (< 1e-4)"),
    )
}

// ---------------------------------------------------------------- 4

fn small_experiment(seed: u64, plan: &SkewPlan) -> ExperimentData {
    let spec = SyntheticSpec {
        n_classes: 4,
        samples_per_class: 60,
        channels: 3,
        positions_per_channel: 3,
        center_scale: 1.5,
        noise_std: 1.0,
        chroma_share: 0.5,
        seed,
    };
    build_experiment(&spec, plan, 20).unwrap()
}

fn trajectory_digest(cfg: &RunConfig, data: &debias_core::data::Dataset) -> (usize, Vec<u8>) {
    let mut hasher = Sha256::new();
    let mut steps = 0;
    train_observed(cfg, data, &mut |_| {}, &mut |_, p| {
        steps += 1;
        for v in p.as_slice() {
            hasher.update(v.to_bits().to_le_bytes());
        }
    })
    .unwrap();
    (steps, hasher.finalize().to_vec())
}

fn kappa_identity() -> Outcome {
    let data = small_experiment(21, &SkewPlan::sensitive_default(4).unwrap());
    let mut cfg = RunConfig::from_toml_str(
        "mode = \"bayes_weighted\"\nlayer_sizes = [9, 8, 4]\nactivation = \"relu\"\nalpha0 = 1e-4\n\
         cycles = 3\nepochs_per_cycle = 6\nsampling_len = 2\ntemperature = 1.0\nmomentum = 0.9\n\
         kappa = 0.0\nbatch_size = 16\nseed = 4\n",
    )
    .unwrap();
    let (steps, weighted) = trajectory_digest(&cfg, &data.train);
    cfg.mode = Mode::BayesUnweighted;
    let (steps_u, unweighted) = trajectory_digest(&cfg, &data.train);
    Outcome::new(
        steps == steps_u && steps > 0 && weighted == unweighted,
        format!("{steps} parameter snapshots, digests {}", if weighted == unweighted { "equal" } else { "differ" }),
    )
}

// ---------------------------------------------------------------- 5

mod oracle {
    use super::*;

    fn rate(hits: usize, total: usize) -> Option<f64> {
        (total > 0).then(|| hits as f64 / total as f64)
    }

    fn count(records: &[EvalRecord], pred: impl Fn(&EvalRecord) -> bool) -> usize {
        records.iter().filter(|r| pred(r)).count()
    }

    fn attr(r: &EvalRecord, a: u8) -> bool {
        r.attribute.as_u8() == a
    }

    pub fn mean_accuracy(records: &[EvalRecord]) -> Option<f64> {
        let acc = |a| {
            rate(
                count(records, |r| attr(r, a) && r.true_class == r.predicted_class),
                count(records, |r| attr(r, a)),
            )
        };
        Some((acc(0)? + acc(1)?) / 2.0)
    }

    pub fn bias(records: &[EvalRecord], c_max: usize) -> Option<f64> {
        let mut terms = Vec::new();
        for c in 0..c_max {
            let gr = count(records, |r| r.predicted_class == c && attr(r, 1));
            let col = count(records, |r| r.predicted_class == c && attr(r, 0));
            if gr + col > 0 {
                terms.push(gr.max(col) as f64 / (gr + col) as f64 - 0.5);
            }
        }
        (!terms.is_empty()).then(|| terms.iter().sum::<f64>() / terms.len() as f64)
    }

    fn tpr(records: &[EvalRecord], c: usize, a: u8) -> Option<f64> {
        rate(
            count(records, |r| r.true_class == c && attr(r, a) && r.predicted_class == c),
            count(records, |r| r.true_class == c && attr(r, a)),
        )
    }

    fn fpr(records: &[EvalRecord], c: usize, a: u8) -> Option<f64> {
        rate(
            count(records, |r| r.true_class != c && attr(r, a) && r.predicted_class == c),
            count(records, |r| r.true_class != c && attr(r, a)),
        )
    }

    fn present(records: &[EvalRecord], c_max: usize) -> Vec<usize> {
        (0..c_max).filter(|&c| records.iter().any(|r| r.true_class == c)).collect()
    }

    pub fn opportunity(records: &[EvalRecord], c_max: usize) -> Option<f64> {
        let classes = present(records, c_max);
        if classes.is_empty() {
            return None;
        }
        let mut sum = 0.0;
        for &c in &classes {
            sum += (tpr(records, c, 1)? - tpr(records, c, 0)?).abs();
        }
        Some(sum / classes.len() as f64)
    }

    pub fn odds(records: &[EvalRecord], c_max: usize) -> Option<f64> {
        let classes = present(records, c_max);
        if classes.is_empty() {
            return None;
        }
        let mut sum = 0.0;
        for &c in &classes {
            let dt = (tpr(records, c, 1)? - tpr(records, c, 0)?).abs();
            let df = (fpr(records, c, 1)? - fpr(records, c, 0)?).abs();
            sum += 0.5 * (dt + df);
        }
        Some(sum / classes.len() as f64)
    }

    /// `(group, tpr, positives)` for every group with positives, and the gap.
    pub fn subgroups(records: &[EvalRecord], positive: Option<usize>) -> Option<(BTreeMap<u32, (f64, usize)>, f64)> {
        let keys: Vec<u32> = records
            .iter()
            .map(|r| r.subgroup.unwrap_or(r.attribute.as_u8() as u32))
            .collect();
        let mut table = BTreeMap::new();
        for g in 0..=7u32 {
            let in_group = |i: usize| keys[i] == g;
            let (mut pos, mut hit) = (0, 0);
            for (i, r) in records.iter().enumerate() {
                if !in_group(i) {
                    continue;
                }
                let is_pos = positive.is_none_or(|c| r.true_class == c);
                if is_pos {
                    pos += 1;
                    if r.predicted_class == positive.unwrap_or(r.true_class) {
                        hit += 1;
                    }
                }
            }
            if pos > 0 {
                table.insert(g, (hit as f64 / pos as f64, pos));
            }
        }
        if table.is_empty() {
            return None;
        }
        let hi = table.values().map(|v| v.0).fold(f64::MIN, f64::max);
        let lo = table.values().map(|v| v.0).fold(f64::MAX, f64::min);
        Some((table, hi - lo))
    }
}

fn random_records(r: &mut impl Rng) -> (Vec<EvalRecord>, usize) {
    let c = r.random_range(2..=10);
    let n = r.random_range(1..=300);
    let groups = r.random_range(1..=7u32);
    let with_subgroups = r.random_bool(0.5);
    let accuracy = r.random_range(0.0..1.0);
    let records = (0..n)
        .map(|_| {
            let y = r.random_range(0..c);
            let p = if r.random_bool(accuracy) { y } else { r.random_range(0..c) };
            let a = if r.random_bool(0.5) { Attribute::Transformed } else { Attribute::Untouched };
            let rec = EvalRecord::new(y, p, a);
            if with_subgroups {
                rec.with_subgroup(r.random_range(0..groups))
            } else {
                rec
            }
        })
        .collect();
    (records, c)
}

fn agree(got: debias_core::Result<f64>, expect: Option<f64>) -> bool {
    match (got, expect) {
        (Ok(g), Some(e)) => (g - e).abs() <= 1e-12,
        (Err(_), None) => true,
        _ => false,
    }
}

fn metric_oracles() -> Outcome {
    let mut r = rng::stream(5, "metric-oracles");
    let mut mismatches: BTreeMap<&str, usize> = BTreeMap::new();
    let mut defined = 0;
    for _ in 0..1_000 {
        let (records, c) = random_records(&mut r);
        let mut check = |name, ok: bool| {
            if !ok {
                *mismatches.entry(name).or_default() += 1;
            }
        };
        check("mean_accuracy", agree(mean_attribute_accuracy(&records), oracle::mean_accuracy(&records)));
        check("bias_amplification", agree(bias_amplification(&records), oracle::bias(&records, c)));
        let og = oracle::opportunity(&records, c);
        defined += og.is_some() as usize;
        check("opportunity_gap", agree(opportunity_gap(&records), og));
        check("average_odds", agree(average_odds_multiclass(&records), oracle::odds(&records, c)));
        for positive in [None, Some(r.random_range(0..c))] {
            let ok = match (subgroup_tpr_table(&records, positive), oracle::subgroups(&records, positive)) {
                (Ok(t), Some((table, gap))) => {
                    t.rows.len() == table.len()
                        && (t.gap - gap).abs() <= 1e-12
                        && t.rows.windows(2).all(|w| w[0].tpr <= w[1].tpr)
                        && t.rows.iter().all(|row| {
                            table
                                .get(&row.subgroup)
                                .is_some_and(|&(tpr, pos)| (row.tpr - tpr).abs() <= 1e-12 && row.positives == pos)
                        })
                }
                (Err(_), None) => true,
                _ => false,
            };
            check("subgroup_tpr_table", ok);
        }
    }
    let total: usize = mismatches.values().sum();
    Outcome::new(
        total == 0,
        format!(
            "1000 record sets ({defined} with every gap defined), mismatches {:?}",
            mismatches
        ),
    )
}

// ---------------------------------------------------------------- 6-9

/// Seeds 100..110 were not used while choosing the desk configuration.
const SEEDS: std::ops::Range<u64> = 100..110;

fn desk_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_classes: 10,
        samples_per_class: 600,
        channels: 3,
        positions_per_channel: 8,
        center_scale: 1.0,
        noise_std: 1.0,
        chroma_share: 0.7,
        seed: 1000 + seed,
    }
}

fn desk_config(mode: Mode, data: &ExperimentData, seed: u64) -> RunConfig {
    RunConfig {
        mode,
        layer_sizes: vec![data.train.n_features, 32, 10],
        activation: Activation::Relu,
        alpha0: 0.1 / data.train.len() as f64,
        cycles: 4,
        epochs_per_cycle: 20,
        sampling_len: 15,
        temperature: 1.0,
        momentum: 0.9,
        prior_precision: 1.0,
        kappa: 0.0,
        batch_size: 64,
        seed,
        train_path: None,
        val_path: None,
        test_untouched_path: None,
        test_transformed_path: None,
        train_sha256: None,
        val_sha256: None,
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Scheme {
    Sensitive,
    Minority,
}

/// Everything trained for one (scheme, seed), built on first use.
#[derive(Default)]
struct SeedRuns {
    data: Option<ExperimentData>,
    unweighted: Option<(Evaluation, f64)>,
    baseline: Option<Evaluation>,
    sweep: Option<SeedSweep>,
}

struct SeedSweep {
    /// `(kappa, validation nll, evaluation)` in grid order.
    rows: Vec<(f64, f64, Evaluation)>,
    best: usize,
    complete: bool,
}

thread_local! {
    static RUNS: RefCell<HashMap<(Scheme, u64), SeedRuns>> = RefCell::new(HashMap::new());
}

fn with_runs<T>(scheme: Scheme, seed: u64, f: impl FnOnce(&mut SeedRuns, &ExperimentData) -> T) -> T {
    RUNS.with(|cell| {
        let mut map = cell.borrow_mut();
        let runs = map.entry((scheme, seed)).or_default();
        let data = runs
            .data
            .take()
            .unwrap_or_else(|| {
                let plan = match scheme {
                    Scheme::Sensitive => SkewPlan::sensitive_default(10).unwrap(),
                    Scheme::Minority => SkewPlan::minority(10).unwrap(),
                };
                build_experiment(&desk_spec(seed), &plan, 200).unwrap()
            });
        let out = f(runs, &data);
        runs.data = Some(data);
        out
    })
}

/// Unweighted evaluation and the top-decile minority ratio.
fn unweighted(scheme: Scheme, seed: u64) -> (Evaluation, f64) {
    with_runs(scheme, seed, |runs, data| {
        runs.unweighted
            .get_or_insert_with(|| {
                let ens = train(&desk_config(Mode::BayesUnweighted, data, seed), &data.train).unwrap();
                let dec = top_decile_composition(ens.table.as_ref().unwrap(), &data.train).unwrap();
                let eval = evaluate(&ens, &data.test_untouched, &data.test_transformed).unwrap();
                (eval, dec.minority_ratio())
            })
            .clone()
    })
}

fn baseline(scheme: Scheme, seed: u64) -> Evaluation {
    with_runs(scheme, seed, |runs, data| {
        runs.baseline
            .get_or_insert_with(|| {
                let ens = train(&desk_config(Mode::BaselineSgd, data, seed), &data.train).unwrap();
                evaluate(&ens, &data.test_untouched, &data.test_transformed).unwrap()
            })
            .clone()
    })
}

fn sweep<T>(scheme: Scheme, seed: u64, f: impl FnOnce(&SeedSweep) -> T) -> T {
    with_runs(scheme, seed, |runs, data| {
        let sw = runs.sweep.get_or_insert_with(|| {
            let grid: Vec<Kappa> = DEFAULT_KAPPA_GRID.iter().map(|&k| Kappa::new(k).unwrap()).collect();
            let report = sweep_kappa(
                &desk_config(Mode::BayesWeighted, data, seed),
                &grid,
                SweepData {
                    train: &data.train,
                    validation: &data.validation,
                    test_untouched: &data.test_untouched,
                    test_transformed: &data.test_transformed,
                },
            )
            .unwrap();
            let best_kappa = report.best.expect("at least one run succeeds");
            let rows: Vec<(f64, f64, Evaluation)> = report
                .rows
                .iter()
                .map(|r| {
                    let eval = Evaluation {
                        report: r.report.clone(),
                        overall_tpr: r.overall_tpr,
                    };
                    (r.kappa.value(), r.val_loss, eval)
                })
                .collect();
            SeedSweep {
                best: rows.iter().position(|r| r.0 == best_kappa.value()).unwrap(),
                complete: report.failures.is_empty() && rows.len() == grid.len(),
                rows,
            }
        });
        f(sw)
    })
}

fn tally(hits: usize, label: &str, extra: String) -> Outcome {
    Outcome::new(hits >= 7, format!("{hits}/{} seeds {label} (>= 7){extra}", SEEDS.end - SEEDS.start))
}

fn uncertainty_bias_correlation() -> Outcome {
    let start = Instant::now();
    let mut hits = 0;
    let mut ratios = Vec::new();
    for seed in SEEDS {
        let (_, ratio) = unweighted(Scheme::Sensitive, seed);
        ratios.push(format!("{ratio:.2}"));
        hits += (ratio > 1.5) as usize;
    }
    let elapsed = start.elapsed();
    let mut out = tally(
        hits,
        "with top-decile rate > 1.5x base",
        format!(", ratios [{}], {:.0}s (< 300s)", ratios.join(" "), elapsed.as_secs_f64()),
    );
    out.pass &= elapsed < Duration::from_secs(300);
    out
}

fn sensitive_direction() -> Outcome {
    let mut hits = 0;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let (unw, _) = unweighted(Scheme::Sensitive, seed);
        let (kappa, best) = sweep(Scheme::Sensitive, seed, |sw| (sw.rows[sw.best].0, sw.rows[sw.best].2.report.clone()));
        let u = &unw.report;
        let lower_bias = best.bias_amplification.unwrap() < u.bias_amplification.unwrap();
        let lower_odds = best.average_odds.unwrap() < u.average_odds.unwrap();
        let drop = u.mean_accuracy.unwrap() - best.mean_accuracy.unwrap();
        let ok = lower_bias && lower_odds && drop < 0.02;
        hits += ok as usize;
        notes.push(format!(
            "k={kappa}:{}{}{}",
            if lower_bias { "b" } else { "-" },
            if lower_odds { "o" } else { "-" },
            if drop < 0.02 { "a" } else { "-" }
        ));
    }
    tally(
        hits,
        "with lower bias and odds gap at < 2pt accuracy cost",
        format!(", best kappa and b/o/a met [{}]", notes.join(" ")),
    )
}

fn minority_direction() -> Outcome {
    let mut hits = 0;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let base = baseline(Scheme::Minority, seed).report.tpr_gap.unwrap();
        let weighted = sweep(Scheme::Minority, seed, |sw| sw.rows[sw.best].2.report.tpr_gap.unwrap());
        hits += (weighted < base) as usize;
        notes.push(format!("{base:.3}->{weighted:.3}"));
    }
    tally(hits, "with a smaller tpr gap than sgd", format!(", gaps [{}]", notes.join(" ")))
}

fn sweep_shape() -> Outcome {
    let mut hits = 0;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let (ok, argmax) = sweep(Scheme::Sensitive, seed, |sw| {
            let tpr: Vec<f64> = sw.rows.iter().map(|r| r.2.overall_tpr).collect();
            let argmax = (0..tpr.len()).fold(0, |b, i| if tpr[i] > tpr[b] { i } else { b });
            let interior = tpr[1..tpr.len() - 1].iter().cloned().fold(f64::MIN, f64::max);
            let ok = sw.complete && interior > tpr[0] && interior > tpr[tpr.len() - 1];
            (ok, sw.rows[argmax].0)
        });
        hits += ok as usize;
        notes.push(argmax.to_string());
    }
    tally(hits, "with a strict interior maximum", format!(", argmax kappa [{}]", notes.join(" ")))
}

// ---------------------------------------------------------------- 10

fn debias(out_dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_debias"))
        .arg("--quiet")
        .arg("--out-dir")
        .arg(out_dir)
        .args(args)
        .stderr(std::process::Stdio::null())
        .status()
        .expect("binary runs")
        .success()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("spec.toml"),
        "n_classes = 4\nsamples_per_class = 60\npositions_per_channel = 3\ncenter_scale = 1.5\nnoise_std = 1.0\nseed = 8\n",
    )
    .unwrap();
    fs::write(
        d.join("run.toml"),
        "mode = \"bayes_weighted\"\nlayer_sizes = [9, 8, 4]\nactivation = \"tanh\"\nalpha0 = 1e-4\n\
         cycles = 3\nepochs_per_cycle = 5\nsampling_len = 2\nmomentum = 0.5\nkappa = 2.0\nbatch_size = 16\n\
         seed = 3\ntrain_path = \"train.csv\"\n",
    )
    .unwrap();
    let spec = d.join("spec.toml");
    let config = d.join("run.toml");
    if !debias(d, &["gen", "--spec", spec.to_str().unwrap(), "--plan", "sensitive"]) {
        return Outcome::new(false, "gen failed");
    }
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = d.join(run);
        if !debias(&out, &["train", "--config", config.to_str().unwrap()]) {
            return Outcome::new(false, format!("train run {run} failed"));
        }
        outputs.push((fs::read(out.join("history.csv")).unwrap(), fs::read(out.join("model.dsa")).unwrap()));
    }
    let history = outputs[0].0 == outputs[1].0;
    let model = outputs[0].1 == outputs[1].1;
    Outcome::new(
        history && model,
        format!(
            "history.csv {} ({} bytes), model.dsa {} ({} bytes)",
            if history { "identical" } else { "differs" },
            outputs[0].0.len(),
            if model { "identical" } else { "differs" },
            outputs[0].1.len()
        ),
    )
}
