use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use debias_core::data::{build_experiment, Dataset, SkewPlan, SyntheticSpec};
use debias_core::io::{load_archive, load_dataset, save_archive, save_dataset, sha256_hex, write_atomic};
use debias_core::trainer::{
    evaluate, sweep_kappa, top_decile_composition, train_observed, RunConfig, SweepData, HISTORY_HEADER,
    SWEEP_HEADER,
};
use debias_core::weighted_loss::Kappa;
use debias_core::{Error, Result};

use crate::manifest::{DatasetHash, Manifest};
use crate::{exit_code, Cli, Command};

pub const TRAIN_FILE: &str = "train.csv";
pub const VAL_FILE: &str = "val.csv";
pub const TEST_COLOUR_FILE: &str = "test_colour.csv";
pub const TEST_GRAY_FILE: &str = "test_gray.csv";
pub const MODEL_FILE: &str = "model.dsa";
pub const HISTORY_FILE: &str = "history.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
pub const DECILE_FILE: &str = "decile.json";
pub const SWEEP_FILE: &str = "sweep.csv";

pub fn run(cli: &Cli) -> Result<u8> {
    fs::create_dir_all(&cli.out_dir).map_err(|e| Error::io(&cli.out_dir, e))?;
    let out = Output { quiet: cli.quiet };
    match &cli.command {
        Command::Gen {
            spec,
            plan,
            test_per_class,
        } => {
            let text = read_text(spec)?;
            let mut spec = SyntheticSpec::from_toml_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path_str(spec))))?;
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let plan = SkewPlan::for_scheme(*plan, spec.n_classes)?;
            let data = build_experiment(&spec, &plan, *test_per_class)?;
            for w in &data.warnings {
                eprintln!("warning: {w}");
            }
            save_dataset(&cli.out_dir.join(TRAIN_FILE), &data.train)?;
            save_dataset(&cli.out_dir.join(VAL_FILE), &data.validation)?;
            save_dataset(&cli.out_dir.join(TEST_COLOUR_FILE), &data.test_untouched)?;
            save_dataset(&cli.out_dir.join(TEST_GRAY_FILE), &data.test_transformed)?;
            out.line("class,untouched,transformed,total");
            let (tr, va) = (data.train.attribute_counts(), data.validation.attribute_counts());
            for c in 0..spec.n_classes {
                let u = tr[c][0] + va[c][0];
                let t = tr[c][1] + va[c][1];
                out.line(&format!("{c},{u},{t},{}", u + t));
            }
            Ok(0)
        }
        Command::Train { config } => cmd_train(cli, config, &out),
        Command::Eval {
            model,
            test_colour,
            test_gray,
            train,
        } => cmd_eval(cli, model, test_colour, test_gray, train.as_deref(), &out),
        Command::Sweep { config, grid } => cmd_sweep(cli, config, grid, &out),
    }
}

struct Output {
    quiet: bool,
}

impl Output {
    fn line(&self, s: &str) {
        if !self.quiet {
            println!("{s}");
        }
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Config with the seed override applied and dataset paths made relative to
/// the config file's directory.
fn load_config(cli: &Cli, path: &Path) -> Result<RunConfig> {
    let text = read_text(path)?;
    let mut cfg = RunConfig::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path_str(path))))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let base = path.parent().unwrap_or(Path::new(""));
    for p in [
        &mut cfg.train_path,
        &mut cfg.val_path,
        &mut cfg.test_untouched_path,
        &mut cfg.test_transformed_path,
    ]
    .into_iter()
    .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("config key `{key}` is required for this command")))
}

/// Load a dataset, record its hash, and check an optional pin.
fn load_hashed(manifest: &mut Manifest, key: &str, path: &Path, pin: Option<&str>) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = sha256_hex(&bytes);
    if let Some(pin) = pin {
        if !pin.eq_ignore_ascii_case(&digest) {
            return Err(Error::Schema(format!(
                "{} has sha256 {digest}, config pins {pin}",
                path_str(path)
            )));
        }
    }
    manifest.datasets.insert(
        key.to_string(),
        DatasetHash {
            path: path.to_path_buf(),
            sha256: digest,
        },
    );
    Dataset::read_csv(&bytes[..]).map_err(|e| match e {
        Error::Schema(msg) => Error::Schema(format!("{}: {msg}", path_str(path))),
        other => other,
    })
}

/// Run `body`, then write the manifest whatever happened.
fn with_manifest(
    cli: &Cli,
    mut manifest: Manifest,
    body: impl FnOnce(&mut Manifest) -> Result<u8>,
) -> Result<u8> {
    let start = Instant::now();
    let result = body(&mut manifest);
    manifest.duration_secs = start.elapsed().as_secs_f64();
    let code = match &result {
        Ok(code) => *code,
        Err(e) => {
            manifest.error = Some(e.to_string());
            exit_code(e)
        }
    };
    manifest.exit_status = code;
    manifest.write(&cli.out_dir.join(MANIFEST_FILE))?;
    result
}

fn cmd_train(cli: &Cli, config: &Path, out: &Output) -> Result<u8> {
    let cfg = load_config(cli, config)?;
    with_manifest(cli, Manifest::new("train", cfg.clone()), |manifest| {
        let train_path = required(&cfg.train_path, "train_path")?;
        let train = load_hashed(manifest, "train", train_path, cfg.train_sha256.as_deref())?;
        let mut history = format!("{HISTORY_HEADER}\n");
        let result = train_observed(
            &cfg,
            &train,
            &mut |r| {
                history.push_str(&r.csv_row());
                history.push('\n');
            },
            &mut |_, _| {},
        );
        // partial history is kept when training aborts
        write_atomic(&cli.out_dir.join(HISTORY_FILE), history.as_bytes())?;
        let ensemble = result?;
        save_archive(&cli.out_dir.join(MODEL_FILE), &ensemble)?;
        out.line(&format!(
            "trained {} ({} draws, {} epochs) -> {}",
            cfg.mode,
            ensemble.draws.len(),
            ensemble.history.len(),
            path_str(&cli.out_dir.join(MODEL_FILE))
        ));
        Ok(0)
    })
}

fn cmd_eval(
    cli: &Cli,
    model: &Path,
    test_colour: &Path,
    test_gray: &Path,
    train: Option<&Path>,
    out: &Output,
) -> Result<u8> {
    let ensemble = load_archive(model)?;
    let colour = load_dataset(test_colour)?;
    let gray = load_dataset(test_gray)?;
    for (p, ds) in [(test_colour, &colour), (test_gray, &gray)] {
        if ds.n_features != ensemble.spec.input_dim() || ds.n_classes != ensemble.spec.n_classes() {
            return Err(Error::Schema(format!(
                "{} has {} features and {} classes, model expects {} and {}",
                path_str(p),
                ds.n_features,
                ds.n_classes,
                ensemble.spec.input_dim(),
                ensemble.spec.n_classes()
            )));
        }
    }
    let eval = evaluate(&ensemble, &colour, &gray)?;
    let mut json = serde_json::to_vec_pretty(&eval.report).expect("report serializes");
    json.push(b'\n');
    write_atomic(&cli.out_dir.join(REPORT_FILE), &json)?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "undefined".into());
    out.line(&format!("mean_accuracy      {}", fmt(eval.report.mean_accuracy)));
    out.line(&format!("bias_amplification {}", fmt(eval.report.bias_amplification)));
    out.line(&format!("opportunity_gap    {}", fmt(eval.report.opportunity_gap)));
    out.line(&format!("average_odds       {}", fmt(eval.report.average_odds)));
    out.line(&format!("tpr_gap            {}", fmt(eval.report.tpr_gap)));
    for w in &eval.report.warnings {
        eprintln!("warning: {w}");
    }

    if let Some(train_path) = train {
        let train = load_dataset(train_path)?;
        let table = ensemble
            .table
            .as_ref()
            .ok_or_else(|| Error::Usage("the model has no uncertainty table (baseline run)".into()))?;
        let dec = top_decile_composition(table, &train)?;
        let mut json = serde_json::to_vec_pretty(&dec).expect("decile table serializes");
        json.push(b'\n');
        write_atomic(&cli.out_dir.join(DECILE_FILE), &json)?;
        out.line(&format!("top-10% sigma decile ({} of {} training samples)", dec.n_top, dec.n_samples));
        out.line("group,top_decile_rate,base_rate");
        out.line(&format!("in_class_minority,{:.4},{:.4}", dec.minority_top_rate, dec.minority_base_rate));
        out.line(&format!("transformed,{:.4},{:.4}", dec.transformed_top_rate, dec.transformed_base_rate));
    }
    Ok(0)
}

fn cmd_sweep(cli: &Cli, config: &Path, grid: &[f64], out: &Output) -> Result<u8> {
    let cfg = load_config(cli, config)?;
    let grid = grid.iter().map(|&k| Kappa::new(k)).collect::<Result<Vec<_>>>()?;
    with_manifest(cli, Manifest::new("sweep", cfg.clone()), |manifest| {
        let train = load_hashed(
            manifest,
            "train",
            required(&cfg.train_path, "train_path")?,
            cfg.train_sha256.as_deref(),
        )?;
        let val = load_hashed(manifest, "val", required(&cfg.val_path, "val_path")?, cfg.val_sha256.as_deref())?;
        let colour = load_hashed(
            manifest,
            "test_colour",
            required(&cfg.test_untouched_path, "test_untouched_path")?,
            None,
        )?;
        let gray = load_hashed(
            manifest,
            "test_gray",
            required(&cfg.test_transformed_path, "test_transformed_path")?,
            None,
        )?;
        for ds in [&val, &colour, &gray] {
            train.check_compatible(ds)?;
        }
        let report = sweep_kappa(
            &cfg,
            &grid,
            SweepData {
                train: &train,
                validation: &val,
                test_untouched: &colour,
                test_transformed: &gray,
            },
        )?;
        let mut csv = format!("{SWEEP_HEADER}\n");
        for row in &report.rows {
            csv.push_str(&row.csv_row());
            csv.push('\n');
        }
        write_atomic(&cli.out_dir.join(SWEEP_FILE), csv.as_bytes())?;
        if !cli.quiet {
            print!("{csv}");
        }
        if let Some(best) = report.best {
            out.line(&format!("best kappa: {best}"));
        }
        for (k, e) in &report.failures {
            eprintln!("error: run with kappa {k} failed: {e}");
        }
        Ok(if report.failures.is_empty() { 0 } else { 4 })
    })
}
