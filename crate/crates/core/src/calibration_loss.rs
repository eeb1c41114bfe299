//! Support-space and residual-space SKL matching losses, the SSA baseline
//! loss, and their closed-form gradients with respect to the feature batch.
//!
//! Every 1-D term has the form
//! `SKL(N(0, s) ‖ N(m, v)) = ½[(m² + v)/s + (m² + s)/v − 2]`
//! (the log-determinant terms of the two KL directions cancel).
//!
//! Gradients are taken through the batch statistics: for a probe with batch
//! projections `p_i`, `∂m/∂p_i = 1/B` and `∂v/∂p_i = 2(p_i − m)/B`. A clamped
//! variance contributes no gradient and raises `clamp_active`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{PscError, Result};
use crate::probe_bank::{probe_moments, source_probe_variance, ProbeBank, ProbeKind, ProbeMoments};
use crate::spectral_model::{
    FeatureMatrix, ResidualCoords, SourceSpectralModel, SupportCoords, DEFAULT_EPS_VAR,
};

/// Frozen linear head `ŷ = wᵀz + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorHead {
    pub w: Array1<f64>,
    pub b: f64,
}

impl RegressorHead {
    pub fn new(w: Array1<f64>, b: f64) -> Self {
        Self { w, b }
    }

    pub fn predict(&self, features: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        if features.ncols() != self.w.len() {
            return Err(PscError::DimMismatch { expected: self.w.len(), got: features.ncols() });
        }
        Ok(features.dot(&self.w) + self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PscHyperParams {
    /// Additive offset inside the probe weight.
    pub c: f64,
    /// Exponent of the probe weight.
    pub gamma: f64,
    /// Weight of the residual loss in the combined objective.
    pub lambda_res: f64,
    pub eps_var: f64,
}

impl Default for PscHyperParams {
    fn default() -> Self {
        Self { c: 1.0, gamma: 1.0, lambda_res: 1.0, eps_var: DEFAULT_EPS_VAR }
    }
}

impl PscHyperParams {
    pub fn with_lambda(lambda_res: f64) -> Self {
        Self { lambda_res, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(PscError::InvalidHyperParams(format!("c = {} must be > 0", self.c)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(PscError::InvalidHyperParams(format!("gamma = {} must be > 0", self.gamma)));
        }
        if !(self.lambda_res >= 0.0 && self.lambda_res.is_finite()) {
            return Err(PscError::InvalidHyperParams(format!(
                "lambda_res = {} must be >= 0",
                self.lambda_res
            )));
        }
        if !(self.eps_var > 0.0) {
            return Err(PscError::InvalidHyperParams(format!("eps_var = {} must be > 0", self.eps_var)));
        }
        Ok(())
    }
}

/// Batch statistics of the residual block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    /// `‖μ̂_⊥‖²`.
    pub mean_norm_sq: f64,
    /// Per-dimension residual variance `ν̂_⊥`, clamped to `eps_var`.
    pub nu: f64,
    pub dim_residual: usize,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_sup: f64,
    pub l_res: f64,
    /// Value of the objective being minimised: `l_sup + λ·l_res` for PSC,
    /// the SSA loss for the SSA baseline.
    pub l_psc: f64,
    /// Weighted per-probe SKL terms; they sum to `K²·l_sup`.
    pub per_probe: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Symmetric KL between `N(0, lam_s)` and `N(mu_t, var_t)`.
pub fn gaussian_skl_scalar(lam_s: f64, mu_t: f64, var_t: f64) -> Result<f64> {
    if !(lam_s > 0.0) || !lam_s.is_finite() {
        return Err(PscError::NonPositiveVariance(lam_s));
    }
    if !(var_t > 0.0) || !var_t.is_finite() {
        return Err(PscError::NonPositiveVariance(var_t));
    }
    let m2 = mu_t * mu_t;
    Ok(0.5 * ((m2 + var_t) / lam_s + (m2 + lam_s) / var_t - 2.0))
}

/// Probe weights `β_q = (|aᵀq| + c)^γ` with `a = V w`.
pub fn compute_probe_weights(
    head: &RegressorHead,
    model: &SourceSpectralModel,
    bank: &ProbeBank,
    hyper: &PscHyperParams,
) -> Result<Array1<f64>> {
    if bank.k() != model.dim_k() {
        return Err(PscError::DimMismatch { expected: model.dim_k(), got: bank.k() });
    }
    let a = model.head_support(head.w.view())?;
    Ok(bank.probes().iter().map(|q| (a.dot(q).abs() + hyper.c).powf(hyper.gamma)).collect())
}

/// Prediction-aware support loss, normalised by the bank size `K²`.
pub fn support_loss(
    model: &SourceSpectralModel,
    bank: &ProbeBank,
    head: &RegressorHead,
    hyper: &PscHyperParams,
    moments: &ProbeMoments,
) -> Result<(f64, Array1<f64>)> {
    support_loss_restricted(model, bank, head, hyper, moments, |_| true)
}

/// Support loss summed over the probes accepted by `keep`.
///
/// The normaliser stays the full bank size `K²`, so the axis-only
/// restriction with `c = γ = 1` equals the SSA loss divided by `K²`.
pub fn support_loss_restricted(
    model: &SourceSpectralModel,
    bank: &ProbeBank,
    head: &RegressorHead,
    hyper: &PscHyperParams,
    moments: &ProbeMoments,
    keep: impl Fn(ProbeKind) -> bool,
) -> Result<(f64, Array1<f64>)> {
    if moments.means.len() != bank.len() {
        return Err(PscError::DimMismatch { expected: bank.len(), got: moments.means.len() });
    }
    let beta = compute_probe_weights(head, model, bank, hyper)?;
    let src = source_probe_variance(bank, model.lambdas())?;
    let mut per_probe = Array1::zeros(bank.len());
    for (q, kind) in bank.kinds().iter().enumerate() {
        if keep(*kind) {
            per_probe[q] = beta[q] * gaussian_skl_scalar(src[q], moments.means[q], moments.vars[q])?;
        }
    }
    let total = per_probe.sum() / bank.len() as f64;
    Ok((total, per_probe))
}

pub fn residual_stats(residuals: &ResidualCoords, eps_var: f64) -> Result<ResidualStats> {
    let b = residuals.data.nrows();
    if b < 2 {
        return Err(PscError::TooFewSamples { needed: 2, got: b });
    }
    if residuals.dim_residual == 0 {
        return Err(PscError::InvalidK { k: residuals.data.ncols(), d: residuals.data.ncols() });
    }
    let mean = residuals.data.mean_axis(Axis(0)).expect("non-empty");
    let centered = &residuals.data - &mean.view().insert_axis(Axis(0));
    let spread = centered.iter().map(|x| x * x).sum::<f64>() / (b * residuals.dim_residual) as f64;
    let clamped = spread < eps_var;
    Ok(ResidualStats {
        mean_norm_sq: mean.dot(&mean),
        nu: if clamped { eps_var } else { spread },
        dim_residual: residuals.dim_residual,
        clamped,
    })
}

/// Per-dimension residual SKL between `N(0, τI)` and `N(μ̂_⊥, ν̂I)`.
///
/// This is the full complement SKL divided by `D − K`; the theory checks use
/// the unnormalised form.
pub fn residual_loss(tau: f64, stats: &ResidualStats) -> Result<f64> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(PscError::NonPositiveTau(tau));
    }
    if !(stats.nu > 0.0) {
        return Err(PscError::NonPositiveVariance(stats.nu));
    }
    let dr = stats.dim_residual as f64;
    let nu = stats.nu;
    Ok(0.5 * (stats.mean_norm_sq / dr * (1.0 / tau + 1.0 / nu) + tau / nu + nu / tau - 2.0))
}

/// Combined objective `l_sup + λ·l_res` on a feature batch.
pub fn psc_loss(
    model: &SourceSpectralModel,
    bank: &ProbeBank,
    head: &RegressorHead,
    hyper: &PscHyperParams,
    features: &FeatureMatrix,
) -> Result<LossReport> {
    hyper.validate()?;
    let (coords, residuals) = model.decompose(features)?;
    let moments = probe_moments(bank, &coords, hyper.eps_var)?;
    let (l_sup, per_probe) = support_loss(model, bank, head, hyper, &moments)?;
    let stats = residual_stats(&residuals, hyper.eps_var)?;
    let l_res = residual_loss(model.tau(), &stats)?;
    let beta = compute_probe_weights(head, model, bank, hyper)?;
    Ok(LossReport {
        l_sup,
        l_res,
        l_psc: l_sup + hyper.lambda_res * l_res,
        per_probe: per_probe.to_vec(),
        beta: beta.to_vec(),
    })
}

/// SSA baseline: `Σ_k (1 + |wᵀv_k|)·SKL(N(0, λ_k) ‖ N(μ̂_k, σ̂_k²))` over the
/// support axes, unnormalised.
pub fn ssa_loss(model: &SourceSpectralModel, head: &RegressorHead, features: &FeatureMatrix) -> Result<f64> {
    let coords = model.project_support(features)?;
    let a = model.head_support(head.w.view())?;
    let b = coords.rows();
    if b < 2 {
        return Err(PscError::TooFewSamples { needed: 2, got: b });
    }
    let n = b as f64;
    let mut total = 0.0;
    for (k, col) in coords.0.columns().into_iter().enumerate() {
        let m = col.sum() / n;
        let v = (col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).max(model.eps_var());
        total += (1.0 + a[k].abs()) * gaussian_skl_scalar(model.lambdas()[k], m, v)?;
    }
    Ok(total)
}

/// Which test-time objective drives adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    #[default]
    Psc,
    Ssa,
}

/// Loss value together with its gradient with respect to every feature entry.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub report: LossReport,
    /// `B × D`, entry `(i, d)` is `∂L/∂z_{i,d}`.
    pub grad: Array2<f64>,
    /// Some variance hit the clamp floor; its partial derivative was taken as 0.
    pub clamp_active: bool,
}

/// Weighted sum of projected 1-D SKL terms and its gradient in support coordinates.
struct ProjectedSkl {
    per_probe: Array1<f64>,
    grad_u: Array2<f64>,
    clamp_active: bool,
}

/// `probes` is `Q × K`; each term is scaled by `weights[q] / norm` in the gradient.
fn projected_skl(
    coords: &SupportCoords,
    probes: ArrayView2<'_, f64>,
    src_var: ArrayView1<'_, f64>,
    weights: ArrayView1<'_, f64>,
    norm: f64,
    eps_var: f64,
) -> Result<ProjectedSkl> {
    let b = coords.rows();
    if b < 2 {
        return Err(PscError::TooFewSamples { needed: 2, got: b });
    }
    let n = b as f64;
    let proj = coords.0.dot(&probes.t());
    let nq = probes.nrows();
    let mut per_probe = Array1::zeros(nq);
    let mut coeff = Array2::zeros((b, nq));
    let mut clamp_active = false;
    for q in 0..nq {
        if weights[q] == 0.0 {
            continue;
        }
        let col = proj.column(q);
        let m = col.sum() / n;
        let raw = col.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / n;
        let clamped = raw < eps_var;
        clamp_active |= clamped;
        let v = if clamped { eps_var } else { raw };
        let s = src_var[q];
        per_probe[q] = weights[q] * gaussian_skl_scalar(s, m, v)?;

        let scale = weights[q] / norm;
        let g_m = m * (1.0 / s + 1.0 / v);
        let g_v = if clamped { 0.0 } else { 0.5 * (1.0 / s - (m * m + s) / (v * v)) };
        for i in 0..b {
            coeff[[i, q]] = scale * (g_m + 2.0 * g_v * (col[i] - m)) / n;
        }
    }
    let grad_u = coeff.dot(&probes);
    Ok(ProjectedSkl { per_probe, grad_u, clamp_active })
}

/// Residual loss gradient with respect to the ambient residual rows.
fn residual_grad(residuals: &ResidualCoords, tau: f64, stats: &ResidualStats) -> Array2<f64> {
    let b = residuals.data.nrows() as f64;
    let dr = stats.dim_residual as f64;
    let nu = stats.nu;
    let mean = residuals.data.mean_axis(Axis(0)).expect("non-empty");
    let d_mean_sq = 0.5 / dr * (1.0 / tau + 1.0 / nu);
    let d_nu = if stats.clamped {
        0.0
    } else {
        0.5 * (-stats.mean_norm_sq / (dr * nu * nu) - tau / (nu * nu) + 1.0 / tau)
    };
    let centered = &residuals.data - &mean.view().insert_axis(Axis(0));
    let mean_term = &mean * (2.0 * d_mean_sq / b);
    centered * (2.0 * d_nu / (b * dr)) + &mean_term.view().insert_axis(Axis(0))
}

/// Map a support-coordinate gradient back to feature space: `∂L/∂z = (∂L/∂u) V`.
fn lift_support(model: &SourceSpectralModel, grad_u: &Array2<f64>) -> Array2<f64> {
    grad_u.dot(&model.basis_v())
}

/// Apply `P_⊥` to every row.
fn project_rows_to_complement(model: &SourceSpectralModel, g: Array2<f64>) -> Array2<f64> {
    let coords = g.dot(&model.basis_v().t());
    &g - &coords.dot(&model.basis_v())
}

/// `psc_loss` together with `∂ℒ_PSC/∂z` for every sample.
pub fn psc_loss_grad(
    model: &SourceSpectralModel,
    bank: &ProbeBank,
    head: &RegressorHead,
    hyper: &PscHyperParams,
    features: &FeatureMatrix,
) -> Result<LossGradient> {
    hyper.validate()?;
    if bank.k() != model.dim_k() {
        return Err(PscError::DimMismatch { expected: model.dim_k(), got: bank.k() });
    }
    let (coords, residuals) = model.decompose(features)?;
    let beta = compute_probe_weights(head, model, bank, hyper)?;
    let src = source_probe_variance(bank, model.lambdas())?;
    let kk = bank.len() as f64;
    let probes = bank.as_matrix();
    let sup = projected_skl(&coords, probes.view(), src.view(), beta.view(), kk, hyper.eps_var)?;
    let l_sup = sup.per_probe.sum() / kk;

    let stats = residual_stats(&residuals, hyper.eps_var)?;
    let l_res = residual_loss(model.tau(), &stats)?;

    let mut grad = lift_support(model, &sup.grad_u);
    if hyper.lambda_res != 0.0 {
        let g_res = project_rows_to_complement(model, residual_grad(&residuals, model.tau(), &stats));
        grad.scaled_add(hyper.lambda_res, &g_res);
    }
    let clamp_active = sup.clamp_active || (hyper.lambda_res != 0.0 && stats.clamped);
    Ok(LossGradient {
        report: LossReport {
            l_sup,
            l_res,
            l_psc: l_sup + hyper.lambda_res * l_res,
            per_probe: sup.per_probe.to_vec(),
            beta: beta.to_vec(),
        },
        grad,
        clamp_active,
    })
}

/// `ssa_loss` together with its feature gradient.
///
/// The report carries the SSA loss in both `l_sup` and `l_psc`; `per_probe`
/// and `beta` are indexed by support axis.
pub fn ssa_loss_grad(
    model: &SourceSpectralModel,
    head: &RegressorHead,
    features: &FeatureMatrix,
) -> Result<LossGradient> {
    let coords = model.project_support(features)?;
    let a = model.head_support(head.w.view())?;
    let alpha = a.mapv(|x| 1.0 + x.abs());
    let axes = Array2::<f64>::eye(model.dim_k());
    let sup = projected_skl(&coords, axes.view(), model.lambdas(), alpha.view(), 1.0, model.eps_var())?;
    let value = sup.per_probe.sum();
    Ok(LossGradient {
        report: LossReport {
            l_sup: value,
            l_res: 0.0,
            l_psc: value,
            per_probe: sup.per_probe.to_vec(),
            beta: alpha.to_vec(),
        },
        grad: lift_support(model, &sup.grad_u),
        clamp_active: sup.clamp_active,
    })
}

/// Loss and feature gradient for the chosen objective.
pub fn objective_grad(
    kind: ObjectiveKind,
    model: &SourceSpectralModel,
    bank: &ProbeBank,
    head: &RegressorHead,
    hyper: &PscHyperParams,
    features: &FeatureMatrix,
) -> Result<LossGradient> {
    match kind {
        ObjectiveKind::Psc => psc_loss_grad(model, bank, head, hyper, features),
        ObjectiveKind::Ssa => ssa_loss_grad(model, head, features),
    }
}
