use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndarray::Array2;
use psc_bench::experiment::{adapt_on_stream, prepare_source, run_experiment_csv, Method, SourceCache};
use psc_bench::{evaluate, gen_synthetic_task, BenchError, ExperimentConfig, Result, SyntheticTask};
use psc_core::adaptation::ToyRegressor;
use psc_core::theory::verify_theory;
use psc_core::{fit_source_model, FeatureMatrix, KSelection, SourceSpectralModel};
use serde::Deserialize;

/// Relative output paths are resolved under this directory when it is set.
const OUTPUT_DIR_ENV: &str = "PSC_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "psc", version, about = "Predictive spectral calibration benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the source spectral model from a feature matrix or a task file.
    FitSource {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = psc_core::DEFAULT_RHO, conflicts_with = "k")]
        rho: f64,
        #[arg(long)]
        k: Option<usize>,
        /// With a task file: write the pretrained, captured regressor here.
        #[arg(long)]
        regressor_out: Option<PathBuf>,
        /// With a task file: experiment config supplying pretraining settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic task from an experiment config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a regressor on a task's unlabeled target stream.
    Adapt {
        #[arg(long)]
        regressor: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value = "psc(1)")]
        method: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        trace_csv: Option<PathBuf>,
    },
    /// Score a regressor on a task's held-out target set.
    Evaluate {
        #[arg(long)]
        regressor: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every method × seed cell of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check identifiability and the drift bound on random instances.
    VerifyTheory {
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output_path(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(dir) if path.is_relative() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

fn write_output(path: &Path, contents: &str) -> Result<()> {
    let path = output_path(path);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FeatureFile {
    Rows(Vec<Vec<f64>>),
    Wrapped { features: Vec<Vec<f64>> },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn fit_source(
    input: &Path,
    out: &Path,
    select: KSelection,
    regressor_out: Option<&Path>,
    config: Option<&Path>,
) -> Result<String> {
    let text = fs::read_to_string(input)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let (model, note) = if value.get("source").is_some() {
        let task: SyntheticTask = serde_json::from_value(value)?;
        let mut cfg = load_config(config)?;
        cfg.k_select = select;
        let prepared = prepare_source(&cfg, &task)?;
        if let Some(path) = regressor_out {
            write_output(path, &prepared.regressor.to_json()?)?;
        }
        let note = serde_json::json!({ "pretrain": prepared.pretrain });
        (prepared.model, note)
    } else {
        let rows = match serde_json::from_value::<FeatureFile>(value)? {
            FeatureFile::Rows(r) | FeatureFile::Wrapped { features: r } => r,
        };
        let features = FeatureMatrix::from_rows(&rows)?;
        (fit_source_model(&features, select, psc_core::DEFAULT_EPS_VAR)?, serde_json::json!({}))
    };
    write_output(out, &model.to_json()?)?;
    let summary = serde_json::json!({ "d": model.dim_d(), "k": model.dim_k(), "tau": model.tau(), "details": note });
    Ok(summary.to_string())
}

fn adapt(
    regressor: &Path,
    model: &Path,
    task: &Path,
    method: &str,
    config: Option<&Path>,
    out: &Path,
    trace_json: Option<&Path>,
    trace_csv: Option<&Path>,
) -> Result<String> {
    let method: Method = method.parse()?;
    let cfg = load_config(config)?;
    let regressor = ToyRegressor::load(regressor)?;
    let model = SourceSpectralModel::load(model)?;
    let task = SyntheticTask::from_json(&fs::read_to_string(task)?)?;
    let adapt_config = cfg
        .adapt
        .config_for(method, cfg.eps_var, task.seed)
        .ok_or_else(|| BenchError::Config("method 'source' does not adapt".into()))?;
    let (adapted, trace) = adapt_on_stream(regressor, model, adapt_config, &task.target_stream)?;
    write_output(out, &adapted.to_json()?)?;
    if let Some(p) = trace_json {
        write_output(p, &trace.to_json()?)?;
    }
    if let Some(p) = trace_csv {
        write_output(p, &trace.to_csv())?;
    }
    let skipped = trace.batches.iter().filter(|b| b.skipped).count();
    Ok(serde_json::json!({ "batches": trace.len(), "skipped": skipped }).to_string())
}

fn evaluate_cmd(regressor: &Path, task: &Path, out: Option<&Path>) -> Result<String> {
    let regressor = ToyRegressor::load(regressor)?;
    let task = SyntheticTask::from_json(&fs::read_to_string(task)?)?;
    let inputs: Array2<f64> = task.target_eval.inputs;
    let pred = regressor.forward(&FeatureMatrix::new(inputs)?)?.predictions;
    let report = evaluate(pred.view(), task.target_eval.labels.view())?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(p) = out {
        write_output(p, &text)?;
    }
    Ok(text)
}

fn dispatch(cli: Cli) -> Result<(String, bool)> {
    match cli.command {
        Command::FitSource { input, out, rho, k, regressor_out, config } => {
            let select = match k {
                Some(k) => KSelection::Fixed(k),
                None => KSelection::ExplainedVariance(rho),
            };
            Ok((fit_source(&input, &out, select, regressor_out.as_deref(), config.as_deref())?, true))
        }
        Command::GenData { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let task = gen_synthetic_task(&cfg.shift, &cfg.generator, &cfg.sizes, seed)?;
            write_output(&out, &task.to_json()?)?;
            Ok((serde_json::json!({ "seed": seed, "batches": task.target_stream.batches.len() }).to_string(), true))
        }
        Command::Adapt { regressor, model, task, method, config, out, trace, trace_csv } => Ok((
            adapt(&regressor, &model, &task, &method, config.as_deref(), &out, trace.as_deref(), trace_csv.as_deref())?,
            true,
        )),
        Command::Evaluate { regressor, task, out } => Ok((evaluate_cmd(&regressor, &task, out.as_deref())?, true)),
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let path = output_path(&out);
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            let file = BufWriter::new(File::create(&path)?);
            let results = run_experiment_csv(&cfg, &mut SourceCache::new(), file)?;
            let means: Vec<_> = results.means();
            Ok((serde_json::to_string_pretty(&means)?, true))
        }
        Command::VerifyTheory { k, trials, seed, out } => {
            let report = verify_theory(k, trials, seed)?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(p) = out {
                write_output(&p, &text)?;
            }
            Ok((text, report.passed))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok((text, ok)) => {
            println!("{text}");
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            let err = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{err}");
            ExitCode::from(2)
        }
    }
}
