//! Numerical checks of the two guarantees behind the calibration objective:
//! probe-bank identifiability of the support mean and covariance, and the
//! SKL bound on predictive mean drift under Gaussian block models.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calibration_loss::RegressorHead;
use crate::error::{PscError, Result};
use crate::linalg::{random_orthogonal, random_spd, spd_inverse, symmetric_eigen};
use crate::probe_bank::{recover_moments, ProbeBank, ProbeMoments};
use crate::spectral_model::SourceSpectralModel;

/// Smallest eigenvalue accepted as positive definite.
pub const SPD_MIN_EIGENVALUE: f64 = 1e-9;
/// Tolerance on `‖V μ_⊥‖` for a vector to count as lying in the complement.
pub const COMPLEMENT_TOL: f64 = 1e-9;
/// Round-off allowance when enforcing the drift inequalities.
const BOUND_ROUNDOFF: f64 = 1e-12;

/// Gaussian target blocks: support `N(μᵗ, Σᵗ)` and residual `N(μ_⊥ᵗ, νᵗ P_⊥)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockTargetSpec {
    pub mu_t: Array1<f64>,
    pub sigma_t: Array2<f64>,
    pub mu_perp_norm_sq: f64,
    pub nu_t: f64,
}

impl BlockTargetSpec {
    /// The target that coincides with the source blocks of `model`.
    pub fn matching(model: &SourceSpectralModel) -> Self {
        Self {
            mu_t: Array1::zeros(model.dim_k()),
            sigma_t: Array2::from_diag(&model.lambdas()),
            mu_perp_norm_sq: 0.0,
            nu_t: model.tau(),
        }
    }

    fn check(&self, model: &SourceSpectralModel) -> Result<()> {
        let k = model.dim_k();
        if self.mu_t.len() != k {
            return Err(PscError::DimMismatch { expected: k, got: self.mu_t.len() });
        }
        if self.sigma_t.nrows() != k || self.sigma_t.ncols() != k {
            return Err(PscError::DimMismatch { expected: k, got: self.sigma_t.nrows() });
        }
        if !(self.nu_t > 0.0) {
            return Err(PscError::NonPositiveVariance(self.nu_t));
        }
        if !(self.mu_perp_norm_sq >= 0.0) {
            return Err(PscError::InconsistentTarget(format!(
                "negative residual mean norm {}",
                self.mu_perp_norm_sq
            )));
        }
        Ok(())
    }
}

/// Full symmetric KL between two multivariate Gaussians:
/// `½[δᵀ(Σ₁⁻¹ + Σ₂⁻¹)δ + tr(Σ₁Σ₂⁻¹ + Σ₂Σ₁⁻¹ − 2I)]`.
pub fn gaussian_skl_full(
    mu1: ArrayView1<'_, f64>,
    sigma1: ArrayView2<'_, f64>,
    mu2: ArrayView1<'_, f64>,
    sigma2: ArrayView2<'_, f64>,
) -> Result<f64> {
    let k = mu1.len();
    for n in [mu2.len(), sigma1.nrows(), sigma1.ncols(), sigma2.nrows(), sigma2.ncols()] {
        if n != k {
            return Err(PscError::DimMismatch { expected: k, got: n });
        }
    }
    let inv1 = spd_inverse_checked(sigma1)?;
    let inv2 = spd_inverse_checked(sigma2)?;
    let delta = &mu1 - &mu2;
    let quad = delta.dot(&(&inv1 + &inv2).dot(&delta));
    let trace = (sigma1.dot(&inv2) + sigma2.dot(&inv1)).diag().sum() - 2.0 * k as f64;
    Ok(0.5 * (quad + trace))
}

fn spd_inverse_checked(sigma: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let eig = symmetric_eigen(sigma)?;
    let min = eig.min_value();
    if !(min >= SPD_MIN_EIGENVALUE) {
        return Err(PscError::NotSpd { min_eigenvalue: min });
    }
    Ok(spd_inverse(&eig))
}

/// The two SKL blocks that make up `D_PSC`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DPscTerms {
    pub support: f64,
    /// Full (not per-dimension) complement SKL, including the `D − K` trace factor.
    pub residual: f64,
}

impl DPscTerms {
    pub fn total(&self) -> f64 {
        self.support + self.residual
    }
}

pub fn d_psc_terms(model: &SourceSpectralModel, target: &BlockTargetSpec) -> Result<DPscTerms> {
    target.check(model)?;
    let k = model.dim_k();
    let lambda = Array2::from_diag(&model.lambdas());
    let support = gaussian_skl_full(
        Array1::zeros(k).view(),
        lambda.view(),
        target.mu_t.view(),
        target.sigma_t.view(),
    )?;
    let tau = model.tau();
    let nu = target.nu_t;
    let dr = model.dim_residual() as f64;
    let residual = 0.5 * ((1.0 / tau + 1.0 / nu) * target.mu_perp_norm_sq + dr * (tau / nu + nu / tau - 2.0));
    Ok(DPscTerms { support, residual })
}

/// `D_PSC`: support SKL plus the unnormalised residual SKL.
pub fn d_psc(model: &SourceSpectralModel, target: &BlockTargetSpec) -> Result<f64> {
    Ok(d_psc_terms(model, target)?.total())
}

/// Head split `w = Vᵀa + w_⊥`.
pub fn head_split(head: &RegressorHead, model: &SourceSpectralModel) -> Result<(Array1<f64>, Array1<f64>)> {
    let a = model.head_support(head.w.view())?;
    let w_perp = model.complement_part(head.w.view())?;
    Ok((a, w_perp))
}

fn check_mu_perp(model: &SourceSpectralModel, target: &BlockTargetSpec, mu_perp: ArrayView1<'_, f64>) -> Result<()> {
    if mu_perp.len() != model.dim_d() {
        return Err(PscError::DimMismatch { expected: model.dim_d(), got: mu_perp.len() });
    }
    let coords = model.basis_v().dot(&mu_perp);
    let support_norm = coords.dot(&coords).sqrt();
    if support_norm >= COMPLEMENT_TOL {
        return Err(PscError::NotInComplement { support_norm });
    }
    let norm_sq = mu_perp.dot(&mu_perp);
    if (norm_sq - target.mu_perp_norm_sq).abs() > 1e-9 * (1.0 + norm_sq) {
        return Err(PscError::InconsistentTarget(format!(
            "‖μ_⊥‖² = {norm_sq} but target declares {}",
            target.mu_perp_norm_sq
        )));
    }
    Ok(())
}

/// Predictive mean drift `Δ = aᵀμᵗ + w_⊥ᵀμ_⊥ᵗ`.
pub fn mean_drift(
    head: &RegressorHead,
    model: &SourceSpectralModel,
    target: &BlockTargetSpec,
    mu_perp: ArrayView1<'_, f64>,
) -> Result<f64> {
    target.check(model)?;
    check_mu_perp(model, target, mu_perp)?;
    let (a, w_perp) = head_split(head, model)?;
    Ok(a.dot(&target.mu_t) + w_perp.dot(&mu_perp))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    /// `|Δ_μ|`.
    pub drift: f64,
    pub d_psc: f64,
    pub support_skl: f64,
    pub residual_skl: f64,
    /// `x² = μᵗᵀΛ⁻¹μᵗ`.
    pub x_sq: f64,
    /// `y² = ‖μ_⊥‖²/τ`.
    pub y_sq: f64,
    pub bound_tight: f64,
    pub bound_loose: f64,
    /// `bound_tight − drift`.
    pub slack_tight: f64,
    /// `bound_loose − bound_tight`.
    pub slack_loose: f64,
}

/// Evaluate the drift and both bounds; an inequality failure is reported as
/// [`PscError::BoundViolated`].
pub fn check_drift_bound(
    head: &RegressorHead,
    model: &SourceSpectralModel,
    target: &BlockTargetSpec,
    mu_perp: ArrayView1<'_, f64>,
) -> Result<DriftReport> {
    let drift = mean_drift(head, model, target, mu_perp)?.abs();
    let terms = d_psc_terms(model, target)?;
    let d = terms.total();
    let (a, w_perp) = head_split(head, model)?;
    let lambdas = model.lambdas();
    let tau = model.tau();
    let a_quad: f64 = a.iter().zip(lambdas.iter()).map(|(ai, li)| ai * ai * li).sum();
    let b_quad = tau * w_perp.dot(&w_perp);
    let root = (2.0 * d).max(0.0).sqrt();
    let bound_tight = root * (a_quad + b_quad).sqrt();
    let bound_loose = root * (a_quad.sqrt() + b_quad.sqrt());
    let x_sq: f64 = target.mu_t.iter().zip(lambdas.iter()).map(|(m, l)| m * m / l).sum();
    let y_sq = target.mu_perp_norm_sq / tau;

    if drift > bound_tight + BOUND_ROUNDOFF * (1.0 + bound_tight) {
        return Err(PscError::BoundViolated { drift, bound: bound_tight });
    }
    if bound_tight > bound_loose + BOUND_ROUNDOFF * (1.0 + bound_loose) {
        return Err(PscError::BoundViolated { drift: bound_tight, bound: bound_loose });
    }
    Ok(DriftReport {
        drift,
        d_psc: d,
        support_skl: terms.support,
        residual_skl: terms.residual,
        x_sq,
        y_sq,
        bound_tight,
        bound_loose,
        slack_tight: bound_tight - drift,
        slack_loose: bound_loose - bound_tight,
    })
}

/// Exact probe moments `(qᵀμ, qᵀΣq)` of a Gaussian with the given moments.
pub fn analytic_probe_moments(bank: &ProbeBank, mu: ArrayView1<'_, f64>, sigma: ArrayView2<'_, f64>) -> ProbeMoments {
    let means = bank.probes().iter().map(|q| q.dot(&mu)).collect();
    let vars = bank.probes().iter().map(|q| q.dot(&sigma.dot(q))).collect();
    ProbeMoments { means, vars, clamped: vec![false; bank.len()] }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityReport {
    pub k: usize,
    pub trials: usize,
    pub passes: usize,
    pub worst_error: f64,
    pub tol: f64,
}

impl IdentifiabilityReport {
    pub fn all_passed(&self) -> bool {
        self.passes == self.trials
    }
}

/// Random `(μ, Σ ≻ 0)` per trial, exact probe moments, recovery, max-abs error.
pub fn verify_identifiability(k: usize, trials: usize, tol: f64, seed: u64) -> Result<IdentifiabilityReport> {
    if k == 0 || k > 8 {
        return Err(PscError::InvalidK { k, d: 8 });
    }
    let bank = ProbeBank::build(k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut passes = 0;
    let mut worst = 0.0_f64;
    for _ in 0..trials {
        let mu = Array1::from_shape_simple_fn(k, || 2.0 * rng.sample::<f64, _>(StandardNormal));
        let sigma = random_spd(k, 0.1, 10.0, &mut rng);
        let moments = analytic_probe_moments(&bank, mu.view(), sigma.view());
        let (mu_hat, sigma_hat) = recover_moments(&bank, &moments);
        let err = mu_hat
            .iter()
            .zip(mu.iter())
            .chain(sigma_hat.iter().zip(sigma.iter()))
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()));
        worst = worst.max(err);
        if err < tol {
            passes += 1;
        }
    }
    Ok(IdentifiabilityReport { k, trials, passes, worst_error: worst, tol })
}

/// A randomly drawn Gaussian block instance for the drift bound.
#[derive(Debug, Clone)]
pub struct DriftInstance {
    pub model: SourceSpectralModel,
    pub head: RegressorHead,
    pub target: BlockTargetSpec,
    pub mu_perp: Array1<f64>,
}

/// Draw `D ∈ [3, 12]`, `1 ≤ K < D`, a random orthonormal support basis, a
/// random head and random Gaussian target blocks.
pub fn random_drift_instance<R: Rng + ?Sized>(rng: &mut R) -> Result<DriftInstance> {
    let d = rng.random_range(3..=12usize);
    let k = rng.random_range(1..d);
    let q = random_orthogonal(d, rng);
    let basis = q.t().slice(ndarray::s![..k, ..]).to_owned();
    let mut lambdas: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..10.0)).collect();
    lambdas.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let tau = rng.random_range(0.05..5.0);
    let mu_s = Array1::from_shape_simple_fn(d, || rng.sample::<f64, _>(StandardNormal));
    let model = SourceSpectralModel::from_parts(mu_s, basis, Array1::from(lambdas), tau, 1e-8)?;

    let w = Array1::from_shape_simple_fn(d, || rng.sample::<f64, _>(StandardNormal));
    let head = RegressorHead::new(w, rng.random_range(-1.0..1.0));

    let mean_scale = rng.random_range(0.0..3.0);
    let mu_t = Array1::from_shape_simple_fn(k, || mean_scale * rng.sample::<f64, _>(StandardNormal));
    let sigma_t = random_spd(k, 0.1, 10.0, rng);
    let raw = Array1::from_shape_simple_fn(d, || mean_scale * rng.sample::<f64, _>(StandardNormal));
    // Applying the complement projector twice removes the O(ε) support leak of a single pass.
    let once = model.complement_part(raw.view())?;
    let mu_perp = model.complement_part(once.view())?;
    let nu_t = rng.random_range(0.05..5.0);
    let target = BlockTargetSpec { mu_t, sigma_t, mu_perp_norm_sq: mu_perp.dot(&mu_perp), nu_t };
    Ok(DriftInstance { model, head, target, mu_perp })
}

/// Instance where the Cauchy–Schwarz step of the drift bound is tight:
/// `a = (1, 0)`, `Λ = I`, `τ = 1`, `w_⊥ = 0`, `μᵗ = (½, 0)`, matched
/// covariances and no residual shift.
///
/// The remaining slack comes from the SKL lower bound, which drops the
/// `δᵀΣᵗ⁻¹δ` term: here `D_PSC = x² = ¼`, so `bound_tight = √½` while the
/// drift is `½`.
pub fn tightness_instance() -> Result<DriftInstance> {
    let d = 4;
    let mut basis = Array2::zeros((2, d));
    basis[[0, 0]] = 1.0;
    basis[[1, 1]] = 1.0;
    let model = SourceSpectralModel::from_parts(Array1::zeros(d), basis, Array1::ones(2), 1.0, 1e-8)?;
    let head = RegressorHead::new(Array1::from(vec![1.0, 0.0, 0.0, 0.0]), 0.0);
    let target = BlockTargetSpec {
        mu_t: Array1::from(vec![0.5, 0.0]),
        sigma_t: Array2::eye(2),
        mu_perp_norm_sq: 0.0,
        nu_t: 1.0,
    };
    Ok(DriftInstance { model, head, target, mu_perp: Array1::zeros(d) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftBoundReport {
    pub trials: usize,
    /// Instances where `drift > bound_tight` or `bound_tight > bound_loose`.
    pub violations: usize,
    /// Instances where a block SKL fell below its lower bound `½x²` or `½y²`.
    pub lower_bound_violations: usize,
    /// Smallest `bound_tight − drift` seen.
    pub worst_slack_tight: f64,
    /// Largest `drift / bound_tight` seen.
    pub max_ratio: f64,
    /// `|bound_tight − drift|` on [`tightness_instance`].
    pub tightness_error: f64,
    /// `drift / bound_tight` on [`tightness_instance`].
    pub tightness_ratio: f64,
}

impl DriftBoundReport {
    /// Every inequality of the bound held on every instance.
    pub fn all_passed(&self) -> bool {
        self.violations == 0 && self.lower_bound_violations == 0
    }
}

pub fn verify_drift_bound(trials: usize, seed: u64) -> Result<DriftBoundReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut lower = 0;
    let mut worst_slack = f64::INFINITY;
    let mut max_ratio = 0.0_f64;
    for _ in 0..trials {
        let inst = random_drift_instance(&mut rng)?;
        match check_drift_bound(&inst.head, &inst.model, &inst.target, inst.mu_perp.view()) {
            Ok(r) => {
                worst_slack = worst_slack.min(r.slack_tight);
                if r.bound_tight > 0.0 {
                    max_ratio = max_ratio.max(r.drift / r.bound_tight);
                }
                let tol = BOUND_ROUNDOFF;
                if r.support_skl < 0.5 * r.x_sq - tol * (1.0 + r.x_sq)
                    || r.residual_skl < 0.5 * r.y_sq - tol * (1.0 + r.y_sq)
                {
                    lower += 1;
                }
            }
            Err(PscError::BoundViolated { .. }) => violations += 1,
            Err(e) => return Err(e),
        }
    }
    let tight = tightness_instance()?;
    let r = check_drift_bound(&tight.head, &tight.model, &tight.target, tight.mu_perp.view())?;
    Ok(DriftBoundReport {
        trials,
        violations,
        lower_bound_violations: lower,
        worst_slack_tight: if trials == 0 { 0.0 } else { worst_slack },
        max_ratio,
        tightness_error: (r.bound_tight - r.drift).abs(),
        tightness_ratio: r.drift / r.bound_tight,
    })
}

/// Combined report emitted by the `verify-theory` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub identifiability: IdentifiabilityReport,
    pub drift_bound: DriftBoundReport,
    pub passed: bool,
}

pub const IDENTIFIABILITY_TOL: f64 = 1e-10;

pub fn verify_theory(k: usize, trials: usize, seed: u64) -> Result<TheoryReport> {
    let identifiability = verify_identifiability(k, trials, IDENTIFIABILITY_TOL, seed)?;
    let drift_bound = verify_drift_bound(trials, seed.wrapping_add(1))?;
    let passed = identifiability.all_passed() && drift_bound.all_passed();
    Ok(TheoryReport { identifiability, drift_bound, passed })
}
