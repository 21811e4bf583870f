//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use st_impute::attention::AttentionKind;
use st_impute::config::RunConfig;
use st_impute::data::{load_csv, save_csv, Normalization};
use st_impute::error::{Error, Result};
use st_impute::experiment::{model_config_for, run_experiment, fit_model, ExperimentSpec};
use st_impute::missingness::{corrupt_dataset, holdout_dataset, MissingnessSpec, Pattern};
use st_impute::model::StImputeModel;
use st_impute::training::{gradcheck_fixture, gradient_check, save_trace};

#[derive(Parser)]
#[command(name = "st-impute", version, about = "Sparse-attention time-series imputation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Hold out values from a dataset under a missingness pattern.
    SimulateMissing {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        pattern: Pattern,
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupted dataset.
        #[arg(long)]
        output: PathBuf,
        /// Held-out ground truth, same layout, everything else empty.
        #[arg(long)]
        holdout: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        labeled_fraction: Option<f64>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional per-epoch loss trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Fill every missing cell of a dataset with a trained model.
    Impute {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run an evaluation sweep and write `<out-dir>/report.csv`.
    Evaluate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare tape gradients with finite differences on a tiny model.
    Gradcheck {
        #[arg(long, default_value = "sparse")]
        attention: AttentionKind,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numerical() => 3,
        Error::Config(_) => 1,
        // Parse errors in config files are usage errors; in CSV files, data errors.
        Error::Parse { path, .. } if !path.ends_with(".csv") => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SimulateMissing {
            input,
            pattern,
            rate,
            seed,
            output,
            holdout,
        } => simulate(&input, pattern, rate, seed, &output, &holdout),
        Command::Train {
            input,
            config,
            labeled_fraction,
            checkpoint,
            trace,
        } => train_cmd(&input, config.as_deref(), labeled_fraction, &checkpoint, trace.as_deref()),
        Command::Impute {
            checkpoint,
            input,
            output,
        } => impute_cmd(&checkpoint, &input, &output),
        Command::Evaluate { spec, out_dir } => evaluate(&spec, &out_dir),
        Command::Gradcheck { attention } => gradcheck(attention),
    }
}

fn simulate(input: &Path, pattern: Pattern, rate: f64, seed: u64, output: &Path, holdout: &Path) -> Result<()> {
    let data = load_csv(input)?;
    let spec = MissingnessSpec::new(pattern, rate, seed)?;
    let cells = corrupt_dataset(&data, &spec)?;
    let mut corrupted = data.clone();
    for (s, c) in corrupted.series.iter_mut().zip(&cells) {
        *s = c.corrupted.clone();
    }
    save_csv(output, &corrupted)?;
    save_csv(holdout, &holdout_dataset(&data, &cells))?;
    let held: usize = cells.iter().map(|c| c.holdout_count()).sum();
    info!("held out {held} values from {} series", cells.len());
    Ok(())
}

fn train_cmd(
    input: &Path,
    config: Option<&Path>,
    labeled_fraction: Option<f64>,
    checkpoint: &Path,
    trace: Option<&Path>,
) -> Result<()> {
    let data = load_csv(input)?;
    let mut run = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(x) = labeled_fraction {
        run.train.labeled_fraction = x;
    }
    run.train.validate()?;
    let norm = Normalization::fit(&data.series, data.n_features());
    let normalized = data.normalized(&norm);
    let cfg = model_config_for(&run.model, &normalized, run.model.attention_kind);
    let (model, outcome) = fit_model(cfg, &normalized.series, &run.train)?;
    info!(
        "trained {} epochs (kept epoch {}), {} parameters",
        outcome.trace.len(),
        outcome.best_epoch,
        model.param_count()
    );
    model.save(checkpoint, Some(&norm))?;
    if let Some(t) = trace {
        save_trace(t, &outcome.trace)?;
    }
    Ok(())
}

fn impute_cmd(checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    let (model, norm) = StImputeModel::load(checkpoint)?;
    let data = load_csv(input)?;
    if data.n_features() != model.config().n_features {
        return Err(Error::Data(format!(
            "dataset has {} features, checkpoint expects {}",
            data.n_features(),
            model.config().n_features
        )));
    }
    let working = match &norm {
        Some(n) => data.normalized(n),
        None => data.clone(),
    };
    let imputed = model.impute(&working.series)?;
    let mut out = data.clone();
    for (s, mut values) in out.series.iter_mut().zip(imputed) {
        if let Some(n) = &norm {
            n.invert_values(&mut values);
        }
        for (i, v) in values.into_iter().enumerate() {
            // Observed cells are copied from the input, never round-tripped.
            if s.missing[i] {
                s.values[i] = v;
                s.missing[i] = false;
            }
        }
    }
    save_csv(output, &out)
}

fn evaluate(spec_path: &Path, out_dir: &Path) -> Result<()> {
    let spec = ExperimentSpec::load(spec_path)?;
    let result = run_experiment(&spec)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let report = out_dir.join("report.csv");
    result.report.save(&report)?;
    for (method, trace) in &result.traces {
        save_trace(&out_dir.join(format!("trace-{method}.csv")), trace)?;
    }
    info!("wrote {}", report.display());
    Ok(())
}

fn gradcheck(attention: AttentionKind) -> Result<()> {
    const TOLERANCE: f64 = 1e-4;
    let (model, batch) = gradcheck_fixture(attention)?;
    let report = gradient_check(&model, &batch, TOLERANCE)?;
    for e in &report.entries {
        println!("{:<20} {:.3e}", e.name, e.max_relative_error);
    }
    println!("max relative error {:.3e} (tolerance {TOLERANCE:e})", report.max_error());
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed: max relative error {:.3e}",
            report.max_error()
        )))
    }
}
