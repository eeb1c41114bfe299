//! Method × seed experiment runner.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use psc_core::adaptation::{AdaptConfig, AdaptMode, AdaptTrace, Adapter, OptimizerConfig, ToyRegressor};
use psc_core::{psc_loss, FeatureMatrix, KSelection, ObjectiveKind, ProbeBank, PscHyperParams, SourceSpectralModel};
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::pretrain::{pretrain, PretrainConfig, PretrainReport};
use crate::synthetic::{gen_synthetic_task, GeneratorConfig, ShiftSpec, SyntheticTask, TargetStream, TaskSizes};

pub const CSV_HEADER: [&str; 6] = ["method", "seed", "r2", "rmse", "mae", "l_psc_final"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    /// No adaptation.
    Source,
    Ssa,
    /// PSC with residual weight λ.
    Psc(f64),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Source => write!(f, "source"),
            Method::Ssa => write!(f, "ssa"),
            Method::Psc(l) => write!(f, "psc({l})"),
        }
    }
}

impl FromStr for Method {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        match t {
            "source" => Ok(Method::Source),
            "ssa" => Ok(Method::Ssa),
            "psc" => Ok(Method::Psc(1.0)),
            _ => {
                let inner = t
                    .strip_prefix("psc(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| BenchError::Config(format!("unknown method '{s}'")))?;
                let lambda: f64 = inner.trim().parse().map_err(|_| BenchError::Config(format!("bad λ in '{s}'")))?;
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(BenchError::Config(format!("λ must be >= 0 in '{s}'")));
                }
                Ok(Method::Psc(lambda))
            }
        }
    }
}

impl TryFrom<String> for Method {
    type Error = BenchError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

/// Adaptation settings shared by every adapted method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptSettings {
    pub optimizer: OptimizerConfig,
    pub steps_per_batch: usize,
    pub mode: AdaptMode,
    pub c: f64,
    pub gamma: f64,
}

impl Default for AdaptSettings {
    fn default() -> Self {
        let base = AdaptConfig::default();
        Self { optimizer: base.optimizer, steps_per_batch: base.steps_per_batch, mode: base.mode, c: 1.0, gamma: 1.0 }
    }
}

impl AdaptSettings {
    pub fn config_for(&self, method: Method, eps_var: f64, seed: u64) -> Option<AdaptConfig> {
        let (objective, lambda_res) = match method {
            Method::Source => return None,
            Method::Ssa => (ObjectiveKind::Ssa, 0.0),
            Method::Psc(l) => (ObjectiveKind::Psc, l),
        };
        Some(AdaptConfig {
            optimizer: self.optimizer,
            steps_per_batch: self.steps_per_batch,
            mode: self.mode,
            objective,
            hyper: PscHyperParams { c: self.c, gamma: self.gamma, lambda_res, eps_var },
            seed,
        })
    }

    /// Hyperparameters of the common `l_psc_final` diagnostic (λ = 1).
    pub fn report_hyper(&self, eps_var: f64) -> PscHyperParams {
        PscHyperParams { c: self.c, gamma: self.gamma, lambda_res: 1.0, eps_var }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub shift: ShiftSpec,
    pub generator: GeneratorConfig,
    pub sizes: TaskSizes,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptSettings,
    pub k_select: KSelection,
    pub eps_var: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            shift: ShiftSpec::none(),
            generator: GeneratorConfig::default(),
            sizes: TaskSizes::default(),
            methods: vec![Method::Source, Method::Ssa, Method::Psc(0.0), Method::Psc(1.0)],
            seeds: (0..10).collect(),
            pretrain: PretrainConfig::default(),
            adapt: AdaptSettings::default(),
            k_select: KSelection::default(),
            eps_var: psc_core::DEFAULT_EPS_VAR,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.seeds.is_empty() {
            return Err(BenchError::Config("methods and seeds must be non-empty".into()));
        }
        self.shift.validate(self.generator.signal_dim())?;
        for m in &self.methods {
            if let Some(c) = self.adapt.config_for(*m, self.eps_var, 0) {
                c.validate()?;
            }
        }
        Ok(())
    }

    /// Everything the pretrained source side depends on.
    fn source_fingerprint(&self) -> String {
        serde_json::to_string(&(&self.generator, self.sizes.n_source, &self.pretrain, &self.k_select, self.eps_var))
            .expect("serializable")
    }
}

/// Source-side artifacts of one seed: captured regressor and frozen model.
#[derive(Debug, Clone)]
pub struct PreparedSource {
    pub regressor: ToyRegressor,
    pub model: SourceSpectralModel,
    pub pretrain: PretrainReport,
}

/// Pretraining is the expensive part and depends only on the seed and the
/// source settings, so runs over several shifts can share it.
#[derive(Debug, Default)]
pub struct SourceCache {
    fingerprint: String,
    entries: HashMap<u64, PreparedSource>,
}

impl SourceCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn get_or_prepare(&mut self, config: &ExperimentConfig, task: &SyntheticTask) -> Result<&PreparedSource> {
        let fp = config.source_fingerprint();
        if fp != self.fingerprint {
            self.entries.clear();
            self.fingerprint = fp;
        }
        if !self.entries.contains_key(&task.seed) {
            let prepared = prepare_source(config, task)?;
            self.entries.insert(task.seed, prepared);
        }
        Ok(&self.entries[&task.seed])
    }
}

/// Pretrain on the labeled source set, then capture the source statistics.
pub fn prepare_source(config: &ExperimentConfig, task: &SyntheticTask) -> Result<PreparedSource> {
    let (reg, report) = pretrain(&task.source, &config.pretrain, task.seed)?;
    let inputs = FeatureMatrix::new(task.source.inputs.clone())?;
    let (regressor, model) = reg.capture_source_stats(&inputs, config.k_select, config.eps_var)?;
    Ok(PreparedSource { regressor, model, pretrain: report })
}

/// Adapt on the unlabeled stream. Only the regressor, the frozen model and
/// the target batches are reachable from here.
pub fn adapt_on_stream(
    regressor: ToyRegressor,
    model: SourceSpectralModel,
    config: AdaptConfig,
    stream: &TargetStream,
) -> Result<(ToyRegressor, AdaptTrace)> {
    let mut adapter = Adapter::new(regressor, model, config)?;
    let trace = adapter.adapt_stream(&stream.feature_batches()?);
    Ok((adapter.into_regressor(), trace))
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub method: Method,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub l_psc_final: f64,
    pub trace: Option<AdaptTrace>,
}

/// Run one method on one task with prepared source artifacts.
pub fn run_cell(config: &ExperimentConfig, method: Method, prepared: &PreparedSource, task: &SyntheticTask) -> Result<CellResult> {
    let (regressor, trace) = match config.adapt.config_for(method, config.eps_var, task.seed) {
        None => (prepared.regressor.clone(), None),
        Some(ac) => {
            let (r, t) = adapt_on_stream(prepared.regressor.clone(), prepared.model.clone(), ac, &task.target_stream)?;
            (r, Some(t))
        }
    };
    let eval = regressor.forward(&FeatureMatrix::new(task.target_eval.inputs.clone())?)?;
    let metrics = evaluate(eval.predictions.view(), task.target_eval.labels.view())?;
    let l_psc_final = match task.target_stream.batches.last() {
        Some(b) => {
            let feats = regressor.forward(&FeatureMatrix::new(b.clone())?)?.features;
            let bank = ProbeBank::build(prepared.model.dim_k())?;
            psc_loss(&prepared.model, &bank, &regressor.head, &config.adapt.report_hyper(config.eps_var), &feats)?.l_psc
        }
        None => f64::NAN,
    };
    Ok(CellResult { method, seed: task.seed, metrics, l_psc_final, trace })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    /// Seed, or `mean` for the across-seed average.
    pub seed: String,
    pub r2: f64,
    pub rmse: f64,
    pub mae: f64,
    pub l_psc_final: f64,
}

impl From<&CellResult> for ResultRow {
    fn from(c: &CellResult) -> Self {
        Self {
            method: c.method.to_string(),
            seed: c.seed.to_string(),
            r2: c.metrics.r2,
            rmse: c.metrics.rmse,
            mae: c.metrics.mae,
            l_psc_final: c.l_psc_final,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentResults {
    pub cells: Vec<CellResult>,
}

impl ExperimentResults {
    /// Across-seed mean row per method, in first-seen method order.
    pub fn means(&self) -> Vec<ResultRow> {
        let mut order: Vec<Method> = Vec::new();
        for c in &self.cells {
            if !order.contains(&c.method) {
                order.push(c.method);
            }
        }
        order
            .iter()
            .map(|m| {
                let cells: Vec<&CellResult> = self.cells.iter().filter(|c| c.method == *m).collect();
                let n = cells.len() as f64;
                let avg = |f: fn(&CellResult) -> f64| cells.iter().map(|c| f(c)).sum::<f64>() / n;
                ResultRow {
                    method: m.to_string(),
                    seed: "mean".into(),
                    r2: avg(|c| c.metrics.r2),
                    rmse: avg(|c| c.metrics.rmse),
                    mae: avg(|c| c.metrics.mae),
                    l_psc_final: avg(|c| c.l_psc_final),
                }
            })
            .collect()
    }

    pub fn mean_r2(&self, method: Method) -> Option<f64> {
        let v: Vec<f64> = self.cells.iter().filter(|c| c.method == method).map(|c| c.metrics.r2).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn rows(&self) -> Vec<ResultRow> {
        let mut rows: Vec<ResultRow> = self.cells.iter().map(ResultRow::from).collect();
        rows.extend(self.means());
        rows
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        for row in self.rows() {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| BenchError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Run every method × seed cell, handing each finished row to `on_row`
/// before the next cell starts.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    cache: &mut SourceCache,
    mut on_row: impl FnMut(&ResultRow) -> Result<()>,
) -> Result<ExperimentResults> {
    config.validate()?;
    let mut results = ExperimentResults::default();
    for &seed in &config.seeds {
        let task = gen_synthetic_task(&config.shift, &config.generator, &config.sizes, seed)?;
        let prepared = cache.get_or_prepare(config, &task)?.clone();
        for &method in &config.methods {
            let cell = run_cell(config, method, &prepared, &task)?;
            on_row(&ResultRow::from(&cell))?;
            results.cells.push(cell);
        }
    }
    Ok(results)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResults> {
    run_experiment_with(config, &mut SourceCache::new(), |_| Ok(()))
}

/// Run and stream the CSV to `out`, flushing after every row so a failure
/// leaves the finished cells on disk. Mean rows are appended at the end.
pub fn run_experiment_csv<W: Write>(config: &ExperimentConfig, cache: &mut SourceCache, out: W) -> Result<ExperimentResults> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER)?;
    w.flush()?;
    let results = run_experiment_with(config, cache, |row| {
        w.serialize(row)?;
        w.flush()?;
        Ok(())
    })?;
    for row in results.means() {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(results)
}
