//! Small tanh regressor with frozen source normalization and trainable
//! per-unit affine parameters, plus the online adaptation loop that updates
//! only those affine parameters on unlabeled target batches.
//!
//! Block `l` computes
//! `h_l = tanh(scale_l ⊙ (W_l h_{l−1} + b_l − mean_l) / √var_l + shift_l)`
//! and the last block's output is the feature vector fed to a linear head.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calibration_loss::{objective_grad, LossReport, ObjectiveKind, PscHyperParams, RegressorHead};
use crate::error::{PscError, Result};
use crate::probe_bank::ProbeBank;
use crate::spectral_model::{fit_source_model, FeatureMatrix, KSelection, SourceSpectralModel};

const CHECKPOINT_VERSION: u32 = 1;

/// Linear map, frozen normalization, trainable affine, tanh.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineBlock {
    /// `out × in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub norm_mean: Array1<f64>,
    pub norm_var: Array1<f64>,
    pub affine_scale: Array1<f64>,
    pub affine_shift: Array1<f64>,
}

impl AffineBlock {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn check(&self) -> Result<()> {
        let out = self.out_dim();
        for len in [
            self.bias.len(),
            self.norm_mean.len(),
            self.norm_var.len(),
            self.affine_scale.len(),
            self.affine_shift.len(),
        ] {
            if len != out {
                return Err(PscError::DimMismatch { expected: out, got: len });
            }
        }
        if self.norm_var.iter().any(|&v| !(v > 0.0)) {
            return Err(PscError::NonPositiveVariance(
                self.norm_var.iter().copied().fold(f64::INFINITY, f64::min),
            ));
        }
        Ok(())
    }
}

/// Per-block intermediate values kept for backpropagation.
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub input: Array2<f64>,
    pub normalized: Array2<f64>,
    pub output: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub features: FeatureMatrix,
    pub predictions: Array1<f64>,
}

/// Gradients of one block's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub weight: Option<Array2<f64>>,
    pub bias: Option<Array1<f64>>,
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

/// Affine-parameter gradients for every block, in block order.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub blocks: Vec<BlockGrads>,
}

impl AffineGrads {
    /// Flatten as `[scale_0, shift_0, scale_1, shift_1, …]`, matching
    /// [`ToyRegressor::affine_params`].
    pub fn flatten(&self) -> Array1<f64> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.scale.iter());
            out.extend(b.shift.iter());
        }
        Array1::from(out)
    }
}

/// Feature extractor plus frozen linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyRegressor {
    pub blocks: Vec<AffineBlock>,
    pub head: RegressorHead,
}

impl ToyRegressor {
    pub fn new(blocks: Vec<AffineBlock>, head: RegressorHead) -> Result<Self> {
        let reg = Self { blocks, head };
        reg.check()?;
        Ok(reg)
    }

    fn check(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(PscError::InvalidModel("regressor needs at least one block".into()));
        }
        for b in &self.blocks {
            b.check()?;
        }
        for pair in self.blocks.windows(2) {
            if pair[1].in_dim() != pair[0].out_dim() {
                return Err(PscError::DimMismatch { expected: pair[0].out_dim(), got: pair[1].in_dim() });
            }
        }
        if self.head.w.len() != self.feature_dim() {
            return Err(PscError::DimMismatch { expected: self.feature_dim(), got: self.head.w.len() });
        }
        Ok(())
    }

    /// Random initialisation: weights `N(0, 1/in)`, identity normalization and
    /// affine, head `N(0, 1/D)`.
    pub fn random<R: Rng + ?Sized>(input_dim: usize, widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut blocks = Vec::with_capacity(widths.len());
        let mut prev = input_dim;
        for &w in widths {
            let std = (1.0 / prev as f64).sqrt();
            let weight = Array2::from_shape_simple_fn((w, prev), || std * rng.sample::<f64, _>(StandardNormal));
            blocks.push(AffineBlock {
                weight,
                bias: Array1::zeros(w),
                norm_mean: Array1::zeros(w),
                norm_var: Array1::ones(w),
                affine_scale: Array1::ones(w),
                affine_shift: Array1::zeros(w),
            });
            prev = w;
        }
        let std = (1.0 / prev as f64).sqrt();
        let w = Array1::from_shape_simple_fn(prev, || std * rng.sample::<f64, _>(StandardNormal));
        Self::new(blocks, RegressorHead::new(w, 0.0))
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks.last().expect("non-empty").out_dim()
    }

    fn check_input(&self, inputs: ArrayView2<'_, f64>) -> Result<()> {
        if inputs.ncols() != self.input_dim() {
            return Err(PscError::DimMismatch { expected: self.input_dim(), got: inputs.ncols() });
        }
        Ok(())
    }

    /// Forward pass keeping every block's intermediates.
    pub fn forward_cached(&self, inputs: ArrayView2<'_, f64>) -> Result<Vec<BlockCache>> {
        self.check_input(inputs)?;
        let mut caches: Vec<BlockCache> = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let input = caches.last().map_or_else(|| inputs.to_owned(), |c| c.output.clone());
            let pre = input.dot(&block.weight.t()) + &block.bias.view().insert_axis(Axis(0));
            let cache = block_tail(block, input, pre);
            caches.push(cache);
        }
        Ok(caches)
    }

    /// Features of the last block and head predictions.
    pub fn forward(&self, inputs: &FeatureMatrix) -> Result<ForwardOutput> {
        let caches = self.forward_cached(inputs.view())?;
        let features = caches.into_iter().last().expect("non-empty").output;
        if features.iter().any(|x| !x.is_finite()) {
            return Err(PscError::NonFinite { context: "forward features" });
        }
        let predictions = self.head.predict(features.view())?;
        Ok(ForwardOutput { features: FeatureMatrix::new(features)?, predictions })
    }

    /// Re-estimate every block's normalization statistics from `inputs`,
    /// block by block, returning the caches of the pass with the new statistics.
    ///
    /// Variances are the biased batch variance clamped to `eps_var`.
    pub fn refresh_norm_stats(&mut self, inputs: ArrayView2<'_, f64>, eps_var: f64) -> Result<Vec<BlockCache>> {
        self.check_input(inputs)?;
        if inputs.nrows() < 2 {
            return Err(PscError::TooFewSamples { needed: 2, got: inputs.nrows() });
        }
        let mut caches: Vec<BlockCache> = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let input = caches.last().map_or_else(|| inputs.to_owned(), |c| c.output.clone());
            let pre = input.dot(&block.weight.t()) + &block.bias.view().insert_axis(Axis(0));
            let mean = pre.mean_axis(Axis(0)).expect("non-empty");
            let var = pre.var_axis(Axis(0), 0.0).mapv(|v| v.max(eps_var));
            block.norm_mean = mean;
            block.norm_var = var;
            caches.push(block_tail(block, input, pre));
        }
        Ok(caches)
    }

    /// Record normalization statistics from source inputs and fit the
    /// spectral model on the resulting source features.
    pub fn capture_source_stats(
        &self,
        source_inputs: &FeatureMatrix,
        select: KSelection,
        eps_var: f64,
    ) -> Result<(ToyRegressor, SourceSpectralModel)> {
        let mut captured = self.clone();
        let caches = captured.refresh_norm_stats(source_inputs.view(), eps_var)?;
        let features = FeatureMatrix::new(caches.into_iter().last().expect("non-empty").output)?;
        let model = fit_source_model(&features, select, eps_var)?;
        Ok((captured, model))
    }

    /// Chain rule from a feature gradient back to every block's parameters.
    /// Normalization statistics are treated as constants.
    pub fn backprop(&self, caches: &[BlockCache], feature_grad: ArrayView2<'_, f64>, with_weights: bool) -> Result<Vec<BlockGrads>> {
        let last = caches.last().ok_or(PscError::InvalidModel("empty cache".into()))?;
        if feature_grad.dim() != last.output.dim() {
            return Err(PscError::DimMismatch { expected: last.output.ncols(), got: feature_grad.ncols() });
        }
        let mut grads = Vec::with_capacity(self.blocks.len());
        let mut upstream = feature_grad.to_owned();
        for (l, (block, cache)) in self.blocks.iter().zip(caches).enumerate().rev() {
            let ds = &upstream * &cache.output.mapv(|h| 1.0 - h * h);
            let scale = (&ds * &cache.normalized).sum_axis(Axis(0));
            let shift = ds.sum_axis(Axis(0));
            let inv_std = block.norm_var.mapv(|v| 1.0 / v.sqrt());
            let mult = &block.affine_scale * &inv_std;
            let dpre = &ds * &mult.view().insert_axis(Axis(0));
            let (weight, bias) = if with_weights {
                (Some(dpre.t().dot(&cache.input)), Some(dpre.sum_axis(Axis(0))))
            } else {
                (None, None)
            };
            if l > 0 {
                upstream = dpre.dot(&block.weight);
            }
            grads.push(BlockGrads { weight, bias, scale, shift });
        }
        grads.reverse();
        Ok(grads)
    }

    /// Gradients of every `affine_scale`/`affine_shift` given `∂L/∂features`.
    pub fn backprop_to_affine(&self, inputs: &FeatureMatrix, feature_grad: ArrayView2<'_, f64>) -> Result<AffineGrads> {
        let caches = self.forward_cached(inputs.view())?;
        Ok(AffineGrads { blocks: self.backprop(&caches, feature_grad, false)? })
    }

    pub fn n_affine_params(&self) -> usize {
        self.blocks.iter().map(|b| 2 * b.out_dim()).sum()
    }

    /// Trainable parameters flattened as `[scale_0, shift_0, scale_1, shift_1, …]`.
    pub fn affine_params(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.n_affine_params());
        for b in &self.blocks {
            out.extend(b.affine_scale.iter());
            out.extend(b.affine_shift.iter());
        }
        Array1::from(out)
    }

    pub fn set_affine_params(&mut self, params: ArrayView1<'_, f64>) -> Result<()> {
        if params.len() != self.n_affine_params() {
            return Err(PscError::DimMismatch { expected: self.n_affine_params(), got: params.len() });
        }
        let mut at = 0;
        for b in &mut self.blocks {
            let n = b.out_dim();
            b.affine_scale.assign(&params.slice(ndarray::s![at..at + n]));
            b.affine_shift.assign(&params.slice(ndarray::s![at + n..at + 2 * n]));
            at += 2 * n;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            input_dim: self.input_dim(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockFile {
                    weight: b.weight.rows().into_iter().map(|r| r.to_vec()).collect(),
                    bias: b.bias.to_vec(),
                    norm_mean: b.norm_mean.to_vec(),
                    norm_var: b.norm_var.to_vec(),
                    affine_scale: b.affine_scale.to_vec(),
                    affine_shift: b.affine_shift.to_vec(),
                })
                .collect(),
            head: HeadFile { w: self.head.w.to_vec(), b: self.head.b },
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.version != CHECKPOINT_VERSION {
            return Err(PscError::UnsupportedVersion(file.version));
        }
        let mut blocks = Vec::with_capacity(file.blocks.len());
        for b in file.blocks {
            let rows = b.weight.len();
            let cols = b.weight.first().map_or(0, Vec::len);
            let mut weight = Array2::zeros((rows, cols));
            for (i, r) in b.weight.iter().enumerate() {
                if r.len() != cols {
                    return Err(PscError::DimMismatch { expected: cols, got: r.len() });
                }
                weight.row_mut(i).assign(&ArrayView1::from(r.as_slice()));
            }
            blocks.push(AffineBlock {
                weight,
                bias: Array1::from(b.bias),
                norm_mean: Array1::from(b.norm_mean),
                norm_var: Array1::from(b.norm_var),
                affine_scale: Array1::from(b.affine_scale),
                affine_shift: Array1::from(b.affine_shift),
            });
        }
        let reg = Self::new(blocks, RegressorHead::new(Array1::from(file.head.w), file.head.b))?;
        if reg.input_dim() != file.input_dim {
            return Err(PscError::DimMismatch { expected: file.input_dim, got: reg.input_dim() });
        }
        Ok(reg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn block_tail(block: &AffineBlock, input: Array2<f64>, pre: Array2<f64>) -> BlockCache {
    let inv_std = block.norm_var.mapv(|v| 1.0 / v.sqrt());
    let normalized = (pre - &block.norm_mean.view().insert_axis(Axis(0))) * &inv_std.view().insert_axis(Axis(0));
    let s = &normalized * &block.affine_scale.view().insert_axis(Axis(0))
        + &block.affine_shift.view().insert_axis(Axis(0));
    BlockCache { input, normalized, output: s.mapv(f64::tanh) }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    input_dim: usize,
    blocks: Vec<BlockFile>,
    head: HeadFile,
}

#[derive(Serialize, Deserialize)]
struct BlockFile {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
    norm_mean: Vec<f64>,
    norm_var: Vec<f64>,
    affine_scale: Vec<f64>,
    affine_shift: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HeadFile {
    w: Vec<f64>,
    b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }
}

/// Optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Array1<f64>,
    second: Array1<f64>,
    steps: i32,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, n_params: usize) -> Self {
        Self { config, first: Array1::zeros(n_params), second: Array1::zeros(n_params), steps: 0 }
    }

    pub fn reset(&mut self) {
        self.first.fill(0.0);
        self.second.fill(0.0);
        self.steps = 0;
    }

    /// Update `params` in place. SGD: `v ← μv + g`, `p ← p − lr·v`.
    pub fn step(&mut self, params: &mut Array1<f64>, grad: &Array1<f64>) {
        self.steps += 1;
        match self.config {
            OptimizerConfig::Sgd { lr, momentum } => {
                self.first = &self.first * momentum + grad;
                params.scaled_add(-lr, &self.first);
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                self.first = &self.first * beta1 + &(grad * (1.0 - beta1));
                self.second = &self.second * beta2 + &(grad.mapv(|g| g * g) * (1.0 - beta2));
                let c1 = 1.0 - beta1.powi(self.steps);
                let c2 = 1.0 - beta2.powi(self.steps);
                for ((p, m), v) in params.iter_mut().zip(self.first.iter()).zip(self.second.iter()) {
                    *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    /// Parameters carry over from batch to batch.
    #[default]
    Online,
    /// Parameters and optimizer state reset before every batch.
    Episodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub optimizer: OptimizerConfig,
    pub steps_per_batch: usize,
    pub mode: AdaptMode,
    pub objective: ObjectiveKind,
    pub hyper: PscHyperParams,
    /// Recorded with every run; the update rule itself is deterministic.
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            steps_per_batch: 1,
            mode: AdaptMode::Online,
            objective: ObjectiveKind::Psc,
            hyper: PscHyperParams::default(),
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = self.optimizer.lr();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(PscError::InvalidHyperParams(format!("learning rate {lr} must be >= 0")));
        }
        if self.steps_per_batch == 0 {
            return Err(PscError::InvalidHyperParams("steps_per_batch must be >= 1".into()));
        }
        self.hyper.validate()
    }
}

/// Result of adapting on one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchOutcome {
    /// Loss evaluated before the first update on this batch.
    pub report: LossReport,
    /// `‖θ_after − θ_before‖₂` over the affine parameters.
    pub update_norm: f64,
    pub clamp_active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub index: usize,
    /// `None` when the batch was skipped.
    pub report: Option<LossReport>,
    pub update_norm: f64,
    /// Mean and standard deviation of the batch predictions after the update.
    pub pred_mean: f64,
    pub pred_std: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdaptTrace {
    pub batches: Vec<BatchRecord>,
}

impl AdaptTrace {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per batch: `index,l_sup,l_res,l_psc,update_norm`. Skipped
    /// batches leave the loss columns empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,l_sup,l_res,l_psc,update_norm\n");
        for b in &self.batches {
            match &b.report {
                Some(r) => out.push_str(&format!("{},{},{},{},{}\n", b.index, r.l_sup, r.l_res, r.l_psc, b.update_norm)),
                None => out.push_str(&format!("{},,,,{}\n", b.index, b.update_norm)),
            }
        }
        out
    }

    /// Mean objective value over records `[from, to)` that were not skipped.
    pub fn mean_loss(&self, from: usize, to: usize) -> Option<f64> {
        let vals: Vec<f64> = self.batches[from.min(self.len())..to.min(self.len())]
            .iter()
            .filter_map(|b| b.report.as_ref().map(|r| r.l_psc))
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Test-time adaptation state.
///
/// Construction takes only the regressor, the frozen source model and the
/// configuration; no source samples are reachable from here.
#[derive(Debug, Clone)]
pub struct Adapter {
    regressor: ToyRegressor,
    model: SourceSpectralModel,
    bank: ProbeBank,
    config: AdaptConfig,
    optimizer: Optimizer,
    initial_params: Array1<f64>,
}

impl Adapter {
    pub fn new(regressor: ToyRegressor, model: SourceSpectralModel, config: AdaptConfig) -> Result<Self> {
        config.validate()?;
        if regressor.feature_dim() != model.dim_d() {
            return Err(PscError::DimMismatch { expected: model.dim_d(), got: regressor.feature_dim() });
        }
        let bank = ProbeBank::build(model.dim_k())?;
        let optimizer = Optimizer::new(config.optimizer, regressor.n_affine_params());
        let initial_params = regressor.affine_params();
        Ok(Self { regressor, model, bank, config, optimizer, initial_params })
    }

    pub fn regressor(&self) -> &ToyRegressor {
        &self.regressor
    }

    pub fn into_regressor(self) -> ToyRegressor {
        self.regressor
    }

    pub fn model(&self) -> &SourceSpectralModel {
        &self.model
    }

    pub fn bank(&self) -> &ProbeBank {
        &self.bank
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.config
    }

    /// Objective value and its gradient with respect to the flattened affine parameters.
    pub fn affine_gradient(&self, batch: &FeatureMatrix) -> Result<(LossReport, Array1<f64>, bool)> {
        let caches = self.regressor.forward_cached(batch.view())?;
        let features = FeatureMatrix::new(caches.last().expect("non-empty").output.clone())?;
        let lg = objective_grad(
            self.config.objective,
            &self.model,
            &self.bank,
            &self.regressor.head,
            &self.config.hyper,
            &features,
        )?;
        let grads = AffineGrads { blocks: self.regressor.backprop(&caches, lg.grad.view(), false)? };
        Ok((lg.report, grads.flatten(), lg.clamp_active))
    }

    /// Run `steps_per_batch` optimizer updates on the affine parameters.
    ///
    /// On a non-finite loss or gradient the parameters and optimizer state
    /// are restored and [`PscError::NonFinite`] is returned.
    pub fn adapt_batch(&mut self, batch: &FeatureMatrix) -> Result<BatchOutcome> {
        if batch.rows() < 2 {
            return Err(PscError::TooFewSamples { needed: 2, got: batch.rows() });
        }
        if self.config.mode == AdaptMode::Episodic {
            self.regressor.set_affine_params(self.initial_params.view())?;
            self.optimizer.reset();
        }
        let saved_optimizer = self.optimizer.clone();
        let before = self.regressor.affine_params();
        let mut params = before.clone();
        let mut entry: Option<(LossReport, bool)> = None;
        for _ in 0..self.config.steps_per_batch {
            let step = self.affine_gradient(batch).and_then(|(report, grad, clamp)| {
                if !report.l_psc.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    Err(PscError::NonFinite { context: "adaptation gradient" })
                } else {
                    Ok((report, grad, clamp))
                }
            });
            let (report, grad, clamp) = match step {
                Ok(v) => v,
                Err(e) => {
                    self.regressor.set_affine_params(before.view())?;
                    self.optimizer = saved_optimizer;
                    return Err(e);
                }
            };
            if entry.is_none() {
                entry = Some((report, clamp));
            }
            self.optimizer.step(&mut params, &grad);
            self.regressor.set_affine_params(params.view())?;
        }
        let (report, clamp_active) = entry.expect("steps_per_batch >= 1");
        let diff = &params - &before;
        Ok(BatchOutcome { report, update_norm: diff.dot(&diff).sqrt(), clamp_active })
    }

    /// Adapt over a stream of batches. Batches that fail are skipped and
    /// flagged; the stream continues.
    pub fn adapt_stream(&mut self, batches: &[FeatureMatrix]) -> AdaptTrace {
        let mut trace = AdaptTrace::default();
        for (index, batch) in batches.iter().enumerate() {
            let outcome = self.adapt_batch(batch);
            let (report, update_norm, skipped) = match outcome {
                Ok(o) => (Some(o.report), o.update_norm, false),
                Err(_) => (None, 0.0, true),
            };
            let (pred_mean, pred_std) = match self.regressor.forward(batch) {
                Ok(out) => {
                    let m = out.predictions.mean().unwrap_or(0.0);
                    (m, out.predictions.std(0.0))
                }
                Err(_) => (f64::NAN, f64::NAN),
            };
            trace.batches.push(BatchRecord { index, report, update_norm, pred_mean, pred_std, skipped });
        }
        trace
    }
}
