//! Synthetic source/target regression tasks with controlled covariate shift.
//!
//! Inputs are generated in a latent basis `x = Q [u; r]`: `u` is the
//! label-bearing signal block and `r` a low-variance nuisance block. Labels
//! come from the clean signal `u`, so every shift family corrupts the
//! observed inputs while the labeling map stays fixed.

use ndarray::{Array1, Array2, Axis};
use psc_core::linalg::random_orthogonal;
use psc_core::FeatureMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShiftFamily {
    None,
    /// Rotate consecutive signal-coordinate pairs by `angle` radians.
    SupportRotation { angle: f64 },
    /// Multiply signal coordinate `i` by `factors[i]`; a single factor applies to all.
    SupportScale { factors: Vec<f64> },
    /// Add `N(0, magnitude²)` noise to every nuisance coordinate.
    ResidualLeak { magnitude: f64 },
    /// Offset every input by `scale` along a fixed random unit direction.
    MeanDrift { scale: f64 },
    /// Apply the parts in order.
    Compound { parts: Vec<ShiftFamily> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub family: ShiftFamily,
    /// Interpolates from identity (0) to the nominal family parameters (1).
    pub severity: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ShiftSpec {
    pub fn none() -> Self {
        Self { family: ShiftFamily::None, severity: 0.0, seed: 0 }
    }

    pub fn new(family: ShiftFamily, severity: f64) -> Self {
        Self { family, severity, seed: 0 }
    }

    pub fn validate(&self, signal_dim: usize) -> Result<()> {
        if !(self.severity >= 0.0 && self.severity.is_finite()) {
            return Err(BenchError::InvalidSpec(format!("severity {} must be >= 0", self.severity)));
        }
        validate_family(&self.family, self.severity, signal_dim)
    }
}

fn validate_family(family: &ShiftFamily, severity: f64, signal_dim: usize) -> Result<()> {
    match family {
        ShiftFamily::None => Ok(()),
        ShiftFamily::SupportRotation { angle } | ShiftFamily::ResidualLeak { magnitude: angle } | ShiftFamily::MeanDrift { scale: angle } => {
            if angle.is_finite() {
                Ok(())
            } else {
                Err(BenchError::InvalidSpec("non-finite shift parameter".into()))
            }
        }
        ShiftFamily::SupportScale { factors } => {
            if factors.len() != 1 && factors.len() != signal_dim {
                return Err(BenchError::InvalidSpec(format!(
                    "support_scale needs 1 or {signal_dim} factors, got {}",
                    factors.len()
                )));
            }
            if factors.iter().any(|f| !(1.0 + severity * (f - 1.0) > 0.0)) {
                return Err(BenchError::InvalidSpec("scale factors must stay positive".into()));
            }
            Ok(())
        }
        ShiftFamily::Compound { parts } => parts.iter().try_for_each(|p| validate_family(p, severity, signal_dim)),
    }
}

/// Shape of the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub input_dim: usize,
    /// Standard deviation of each signal coordinate; its length is the signal dimension.
    pub signal_std: Vec<f64>,
    pub residual_std: f64,
    /// Hidden width of the ground-truth labeling map.
    pub label_hidden: usize,
    /// Label noise is set so the noiseless map explains this fraction of label variance.
    pub oracle_r2: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { input_dim: 8, signal_std: vec![2.0, 1.5, 1.0], residual_std: 0.3, label_hidden: 16, oracle_r2: 0.95 }
    }
}

impl GeneratorConfig {
    pub fn signal_dim(&self) -> usize {
        self.signal_std.len()
    }

    fn validate(&self) -> Result<()> {
        let k = self.signal_dim();
        if k == 0 || k >= self.input_dim {
            return Err(BenchError::InvalidSpec(format!("signal dim {k} must lie in [1, {})", self.input_dim)));
        }
        if self.signal_std.iter().any(|s| !(*s > 0.0)) || !(self.residual_std > 0.0) {
            return Err(BenchError::InvalidSpec("standard deviations must be positive".into()));
        }
        if self.label_hidden == 0 || !(self.oracle_r2 > 0.0 && self.oracle_r2 < 1.0) {
            return Err(BenchError::InvalidSpec("label map needs hidden >= 1 and oracle_r2 in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSizes {
    pub n_source: usize,
    pub n_batches: usize,
    pub batch_size: usize,
    pub n_eval: usize,
}

impl Default for TaskSizes {
    fn default() -> Self {
        Self { n_source: 4096, n_batches: 64, batch_size: 64, n_eval: 2048 }
    }
}

/// Realised generator parameters shared by source and target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    /// Orthogonal map from latent `[u; r]` to inputs.
    pub basis: Array2<f64>,
    pub signal_std: Array1<f64>,
    pub residual_std: f64,
    pub label_a: Array2<f64>,
    pub label_c: Array1<f64>,
    pub label_w: Array1<f64>,
    pub noise_std: f64,
}

impl GeneratorParams {
    /// Noiseless label of clean signal coordinates (one row per sample).
    pub fn label_mean(&self, signal: &Array2<f64>) -> Array1<f64> {
        let hidden = (signal.dot(&self.label_a.t()) + &self.label_c.view().insert_axis(Axis(0))).mapv(f64::tanh);
        hidden.dot(&self.label_w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub inputs: Array2<f64>,
    pub labels: Array1<f64>,
}

/// Unlabeled target batches, the only data an adaptation run receives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetStream {
    pub batches: Vec<Array2<f64>>,
}

impl TargetStream {
    pub fn feature_batches(&self) -> Result<Vec<FeatureMatrix>> {
        Ok(self.batches.iter().map(|b| FeatureMatrix::new(b.clone())).collect::<psc_core::Result<_>>()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub seed: u64,
    pub shift: ShiftSpec,
    pub params: GeneratorParams,
    pub source: LabeledSet,
    pub target_stream: TargetStream,
    /// Held out; labels are used only for metrics.
    pub target_eval: LabeledSet,
}

impl SyntheticTask {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Generate a task. The generator parameters and the source set depend only on
/// `seed` and the generator shape, so every shift of the same seed shares them.
pub fn gen_synthetic_task(spec: &ShiftSpec, gen: &GeneratorConfig, sizes: &TaskSizes, seed: u64) -> Result<SyntheticTask> {
    gen.validate()?;
    spec.validate(gen.signal_dim())?;
    if sizes.n_source < 2 || sizes.batch_size < 2 || sizes.n_eval < 2 {
        return Err(BenchError::InvalidSpec("sample sizes must be >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = draw_params(gen, &mut rng);
    let (signal, nuisance) = draw_latent(&params, sizes.n_source, &mut rng);
    let source = label(&params, &signal, &nuisance, &mut rng);

    let mut target_rng = ChaCha8Rng::seed_from_u64(seed);
    target_rng.set_stream(1 + spec.seed);
    let shift = RealisedShift::draw(&spec.family, spec.severity, &params, &mut target_rng);
    let mut batches = Vec::with_capacity(sizes.n_batches);
    for _ in 0..sizes.n_batches {
        let (u, r) = draw_latent(&params, sizes.batch_size, &mut target_rng);
        batches.push(shift.observe(&params, &u, &r, &mut target_rng));
    }
    let (u, r) = draw_latent(&params, sizes.n_eval, &mut target_rng);
    let eval_inputs = shift.observe(&params, &u, &r, &mut target_rng);
    let eval_labels = noisy_labels(&params, &u, &mut target_rng);

    Ok(SyntheticTask {
        seed,
        shift: spec.clone(),
        params,
        source,
        target_stream: TargetStream { batches },
        target_eval: LabeledSet { inputs: eval_inputs, labels: eval_labels },
    })
}

fn draw_params(gen: &GeneratorConfig, rng: &mut ChaCha8Rng) -> GeneratorParams {
    let k = gen.signal_dim();
    let basis = random_orthogonal(gen.input_dim, rng);
    let signal_std = Array1::from(gen.signal_std.clone());
    let h = gen.label_hidden;
    let label_a = Array2::from_shape_fn((h, k), |(_, j)| {
        rng.sample::<f64, _>(StandardNormal) / ((k as f64).sqrt() * signal_std[j])
    });
    let label_c = Array1::from_shape_simple_fn(h, || rng.random_range(-0.5..0.5));
    let label_w = Array1::from_shape_simple_fn(h, || rng.sample::<f64, _>(StandardNormal) / (h as f64).sqrt() * 2.0);
    let mut params = GeneratorParams {
        basis,
        signal_std,
        residual_std: gen.residual_std,
        label_a,
        label_c,
        label_w,
        noise_std: 0.0,
    };
    // Calibrate the noise level on a fixed-size clean sample.
    let probe = Array2::from_shape_fn((8192, k), |(_, j)| params.signal_std[j] * rng.sample::<f64, _>(StandardNormal));
    let f = params.label_mean(&probe);
    let var = f.var(0.0);
    params.noise_std = (var * (1.0 - gen.oracle_r2) / gen.oracle_r2).sqrt();
    params
}

fn draw_latent(params: &GeneratorParams, n: usize, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
    let k = params.signal_std.len();
    let d = params.basis.nrows();
    let u = Array2::from_shape_fn((n, k), |(_, j)| params.signal_std[j] * rng.sample::<f64, _>(StandardNormal));
    let r = Array2::from_shape_simple_fn((n, d - k), || params.residual_std * rng.sample::<f64, _>(StandardNormal));
    (u, r)
}

fn to_inputs(params: &GeneratorParams, u: &Array2<f64>, r: &Array2<f64>) -> Array2<f64> {
    let latent = ndarray::concatenate(Axis(1), &[u.view(), r.view()]).expect("same row count");
    latent.dot(&params.basis.t())
}

fn noisy_labels(params: &GeneratorParams, u: &Array2<f64>, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let mut y = params.label_mean(u);
    y.mapv_inplace(|v| v + params.noise_std * rng.sample::<f64, _>(StandardNormal));
    y
}

fn label(params: &GeneratorParams, u: &Array2<f64>, r: &Array2<f64>, rng: &mut ChaCha8Rng) -> LabeledSet {
    let inputs = to_inputs(params, u, r);
    let labels = noisy_labels(params, u, rng);
    LabeledSet { inputs, labels }
}

/// Shift with its random parts (drift direction) fixed.
enum RealisedShift {
    None,
    Rotation(f64),
    Scale(Vec<f64>),
    Leak(f64),
    Drift(Array1<f64>),
    Compound(Vec<RealisedShift>),
}

impl RealisedShift {
    fn draw(family: &ShiftFamily, s: f64, params: &GeneratorParams, rng: &mut ChaCha8Rng) -> Self {
        let k = params.signal_std.len();
        match family {
            ShiftFamily::None => RealisedShift::None,
            ShiftFamily::SupportRotation { angle } => RealisedShift::Rotation(angle * s),
            ShiftFamily::SupportScale { factors } => {
                let f: Vec<f64> = (0..k).map(|i| factors[if factors.len() == 1 { 0 } else { i }]).collect();
                RealisedShift::Scale(f.iter().map(|f| 1.0 + s * (f - 1.0)).collect())
            }
            ShiftFamily::ResidualLeak { magnitude } => RealisedShift::Leak(magnitude * s),
            ShiftFamily::MeanDrift { scale } => {
                let d = params.basis.nrows();
                let mut dir = Array1::from_shape_simple_fn(d, || rng.sample::<f64, _>(StandardNormal));
                let norm = dir.dot(&dir).sqrt();
                dir *= scale * s / norm;
                RealisedShift::Drift(dir)
            }
            ShiftFamily::Compound { parts } => {
                RealisedShift::Compound(parts.iter().map(|p| RealisedShift::draw(p, s, params, rng)).collect())
            }
        }
    }

    fn apply_latent(&self, u: &mut Array2<f64>, r: &mut Array2<f64>, rng: &mut ChaCha8Rng) {
        match self {
            RealisedShift::None | RealisedShift::Drift(_) => {}
            RealisedShift::Rotation(theta) => {
                let (c, s) = (theta.cos(), theta.sin());
                let k = u.ncols();
                for mut row in u.rows_mut() {
                    for p in (0..k.saturating_sub(1)).step_by(2) {
                        let (a, b) = (row[p], row[p + 1]);
                        row[p] = c * a - s * b;
                        row[p + 1] = s * a + c * b;
                    }
                }
            }
            RealisedShift::Scale(f) => {
                for mut row in u.rows_mut() {
                    for (x, f) in row.iter_mut().zip(f) {
                        *x *= f;
                    }
                }
            }
            RealisedShift::Leak(m) => {
                if *m != 0.0 {
                    r.mapv_inplace(|x| x + m * rng.sample::<f64, _>(StandardNormal));
                }
            }
            RealisedShift::Compound(parts) => parts.iter().for_each(|p| p.apply_latent(u, r, rng)),
        }
    }

    fn offset(&self, out: &mut Array2<f64>) {
        match self {
            RealisedShift::Drift(dir) => *out += &dir.view().insert_axis(Axis(0)),
            RealisedShift::Compound(parts) => parts.iter().for_each(|p| p.offset(out)),
            _ => {}
        }
    }

    /// Observed inputs for clean latent `(u, r)`; the clean `u` stays untouched for labeling.
    fn observe(&self, params: &GeneratorParams, u: &Array2<f64>, r: &Array2<f64>, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut u_obs = u.clone();
        let mut r_obs = r.clone();
        self.apply_latent(&mut u_obs, &mut r_obs, rng);
        let mut x = to_inputs(params, &u_obs, &r_obs);
        self.offset(&mut x);
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TaskSizes {
        TaskSizes { n_source: 4000, n_batches: 8, batch_size: 500, n_eval: 100 }
    }

    fn mean_cov(x: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
        let m = x.mean_axis(Axis(0)).unwrap();
        let c = &*x - &m.view().insert_axis(Axis(0));
        (m, c.t().dot(&c) / (x.nrows() - 1) as f64)
    }

    #[test]
    fn zero_severity_matches_source_distribution() {
        let spec = ShiftSpec::new(ShiftFamily::SupportScale { factors: vec![3.0] }, 0.0);
        let task = gen_synthetic_task(&spec, &GeneratorConfig::default(), &small(), 3).unwrap();
        let target = ndarray::concatenate(Axis(0), &task.target_stream.batches.iter().map(|b| b.view()).collect::<Vec<_>>()).unwrap();
        let (ms, cs) = mean_cov(&task.source.inputs);
        let (mt, ct) = mean_cov(&target);
        let (ns, nt) = (task.source.inputs.nrows() as f64, target.nrows() as f64);
        for i in 0..ms.len() {
            let se = (cs[[i, i]] / ns + ct[[i, i]] / nt).sqrt();
            assert!((ms[i] - mt[i]).abs() < 3.0 * se + 1e-12, "mean {i}");
            for j in 0..ms.len() {
                // Var of a sample covariance entry is (σ_ii σ_jj + σ_ij²)/n.
                let v = cs[[i, i]] * cs[[j, j]] + cs[[i, j]].powi(2);
                let se = (v / ns + v / nt).sqrt();
                assert!((cs[[i, j]] - ct[[i, j]]).abs() < 3.5 * se, "cov {i},{j}");
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = ShiftSpec::new(ShiftFamily::ResidualLeak { magnitude: 1.0 }, 1.0);
        let a = gen_synthetic_task(&spec, &GeneratorConfig::default(), &small(), 11).unwrap();
        let b = gen_synthetic_task(&spec, &GeneratorConfig::default(), &small(), 11).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn source_is_shared_across_shifts() {
        let a = gen_synthetic_task(&ShiftSpec::none(), &GeneratorConfig::default(), &small(), 5).unwrap();
        let b = gen_synthetic_task(&ShiftSpec::new(ShiftFamily::MeanDrift { scale: 2.0 }, 1.0), &GeneratorConfig::default(), &small(), 5).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn residual_leak_inflates_only_the_complement() {
        let gen = GeneratorConfig::default();
        let m = 0.8;
        let spec = ShiftSpec::new(ShiftFamily::ResidualLeak { magnitude: m }, 1.0);
        let task = gen_synthetic_task(&spec, &gen, &small(), 9).unwrap();
        let source = FeatureMatrix::new(task.source.inputs.clone()).unwrap();
        let model = psc_core::fit_source_model(&source, psc_core::KSelection::Fixed(gen.signal_dim()), 1e-8).unwrap();
        let target = ndarray::concatenate(Axis(0), &task.target_stream.batches.iter().map(|b| b.view()).collect::<Vec<_>>()).unwrap();
        let target = FeatureMatrix::new(target).unwrap();
        let (coords, resid) = model.decompose(&target).unwrap();
        let stats = psc_core::residual_stats(&resid, 1e-8).unwrap();
        let expected = model.tau() + m * m;
        assert!((stats.nu - expected).abs() < 0.05 * expected, "nu {} expected {}", stats.nu, expected);
        let bank = psc_core::ProbeBank::build(model.dim_k()).unwrap();
        let moments = psc_core::probe_moments(&bank, &coords, 1e-8).unwrap();
        let src = psc_core::source_probe_variance(&bank, model.lambdas()).unwrap();
        for (v, s) in moments.vars.iter().zip(src.iter()) {
            assert!((v - s).abs() < 0.1 * s, "probe var {v} vs {s}");
        }
    }

    #[test]
    fn labels_follow_clean_signal() {
        let spec = ShiftSpec::new(ShiftFamily::SupportScale { factors: vec![2.0] }, 1.0);
        let task = gen_synthetic_task(&spec, &GeneratorConfig::default(), &small(), 2).unwrap();
        let y = &task.source.labels;
        let var = y.var(0.0);
        let explained = 1.0 - task.params.noise_std.powi(2) / var;
        assert!((explained - 0.95).abs() < 0.02, "{explained}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let gen = GeneratorConfig::default();
        let bad = ShiftSpec::new(ShiftFamily::SupportScale { factors: vec![1.0, 2.0] }, 1.0);
        assert!(matches!(gen_synthetic_task(&bad, &gen, &small(), 0), Err(BenchError::InvalidSpec(_))));
        let bad = ShiftSpec::new(ShiftFamily::None, -1.0);
        assert!(gen_synthetic_task(&bad, &gen, &small(), 0).is_err());
        let bad = ShiftSpec::new(ShiftFamily::SupportScale { factors: vec![-1.0] }, 1.0);
        assert!(gen_synthetic_task(&bad, &gen, &small(), 0).is_err());
    }
}
