//! Block spectral source model.
//!
//! The source feature covariance is summarised by an anisotropic support
//! block (the top-K eigenpairs) plus an isotropic residual floor `tau` on the
//! orthogonal complement. Projectors onto the support and the complement are
//! applied implicitly through the K×D basis; they are never materialised.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{PscError, Result};
use crate::linalg::symmetric_eigen;

/// Default variance clamp shared by the model and the loss statistics.
pub const DEFAULT_EPS_VAR: f64 = 1e-8;
/// Default explained-variance fraction for choosing K.
pub const DEFAULT_RHO: f64 = 0.99;
/// Orthonormality tolerance on the stored basis.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

const MODEL_FILE_VERSION: u32 = 1;

/// A batch of feature vectors, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(Array2<f64>);

impl FeatureMatrix {
    /// Wrap a `B × D` array. Requires `B ≥ 1`, `D ≥ 1` and finite entries.
    ///
    /// The spectral model additionally requires `D ≥ 2`; raw network inputs
    /// may be one-dimensional.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(PscError::TooFewSamples { needed: 1, got: 0 });
        }
        if data.ncols() == 0 {
            return Err(PscError::DimMismatch { expected: 1, got: 0 });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(PscError::NonFinite { context: "feature matrix" });
        }
        Ok(Self(data))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let b = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        let mut data = Array2::zeros((b, d));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(PscError::DimMismatch { expected: d, got: row.len() });
            }
            data.row_mut(i).assign(&ArrayView1::from(row.as_slice()));
        }
        Self::new(data)
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.0.rows().into_iter().map(|r| r.to_vec()).collect()
    }
}

/// How many leading eigen-directions form the predictive support.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KSelection {
    Fixed(usize),
    /// Smallest K whose leading eigenvalues explain at least this variance fraction.
    ExplainedVariance(f64),
}

impl Default for KSelection {
    fn default() -> Self {
        KSelection::ExplainedVariance(DEFAULT_RHO)
    }
}

impl KSelection {
    fn resolve(self, eigenvalues: ArrayView1<'_, f64>) -> Result<usize> {
        let d = eigenvalues.len();
        match self {
            KSelection::Fixed(k) => {
                if k == 0 || k >= d {
                    return Err(PscError::InvalidK { k, d });
                }
                Ok(k)
            }
            KSelection::ExplainedVariance(rho) => {
                if !(rho > 0.0 && rho < 1.0) {
                    return Err(PscError::InvalidFraction(rho));
                }
                let clipped: Vec<f64> = eigenvalues.iter().map(|&l| l.max(0.0)).collect();
                let total: f64 = clipped.iter().sum();
                if total <= 0.0 {
                    return Err(PscError::DegenerateK { dim: d });
                }
                let mut acc = 0.0;
                let mut k = d;
                for (i, l) in clipped.iter().enumerate() {
                    acc += l;
                    if acc / total >= rho {
                        k = i + 1;
                        break;
                    }
                }
                if k >= d {
                    return Err(PscError::DegenerateK { dim: d });
                }
                Ok(k)
            }
        }
    }
}

/// Frozen source statistics: mean, top-K eigenbasis and eigenvalues, residual floor.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpectralModel {
    mu_s: Array1<f64>,
    basis_v: Array2<f64>,
    lambdas: Array1<f64>,
    tau: f64,
    eps_var: f64,
}

/// Support coordinates `u_i = V (z_i − μ)`, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportCoords(pub Array2<f64>);

/// Ambient residuals `r_i = z̄_i − Vᵀ u_i`, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCoords {
    pub data: Array2<f64>,
    /// Dimension of the complement, `D − K`.
    pub dim_residual: usize,
}

impl SupportCoords {
    pub fn rows(&self) -> usize {
        self.0.nrows()
    }
    pub fn cols(&self) -> usize {
        self.0.ncols()
    }
}

impl SourceSpectralModel {
    /// Assemble a model from explicit parts, checking every invariant.
    pub fn from_parts(
        mu_s: Array1<f64>,
        basis_v: Array2<f64>,
        lambdas: Array1<f64>,
        tau: f64,
        eps_var: f64,
    ) -> Result<Self> {
        let d = mu_s.len();
        let k = basis_v.nrows();
        if d < 2 {
            return Err(PscError::InvalidModel(format!("feature dimension {d} < 2")));
        }
        if k == 0 || k >= d {
            return Err(PscError::InvalidK { k, d });
        }
        if basis_v.ncols() != d {
            return Err(PscError::DimMismatch { expected: d, got: basis_v.ncols() });
        }
        if lambdas.len() != k {
            return Err(PscError::DimMismatch { expected: k, got: lambdas.len() });
        }
        if !(eps_var > 0.0 && eps_var.is_finite()) {
            return Err(PscError::InvalidModel(format!("eps_var {eps_var} must be positive")));
        }
        let finite = mu_s.iter().chain(basis_v.iter()).chain(lambdas.iter()).all(|x| x.is_finite());
        if !finite || !tau.is_finite() {
            return Err(PscError::NonFinite { context: "source model" });
        }
        if lambdas.iter().any(|&l| l < eps_var) {
            return Err(PscError::InvalidModel("eigenvalue below eps_var".into()));
        }
        if lambdas.windows(2).into_iter().any(|w| w[0] < w[1]) {
            return Err(PscError::InvalidModel("eigenvalues not non-increasing".into()));
        }
        if tau < eps_var {
            return Err(PscError::NonPositiveTau(tau));
        }
        let gram = basis_v.dot(&basis_v.t());
        let mut worst = 0.0_f64;
        for i in 0..k {
            for j in 0..k {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[[i, j]] - target).abs());
            }
        }
        if worst >= ORTHONORMAL_TOL {
            return Err(PscError::InvalidModel(format!("basis rows not orthonormal ({worst:e})")));
        }
        Ok(Self { mu_s, basis_v, lambdas, tau, eps_var })
    }

    pub fn dim_d(&self) -> usize {
        self.mu_s.len()
    }

    pub fn dim_k(&self) -> usize {
        self.basis_v.nrows()
    }

    pub fn dim_residual(&self) -> usize {
        self.dim_d() - self.dim_k()
    }

    pub fn mu_s(&self) -> ArrayView1<'_, f64> {
        self.mu_s.view()
    }

    /// K × D basis with orthonormal rows.
    pub fn basis_v(&self) -> ArrayView2<'_, f64> {
        self.basis_v.view()
    }

    pub fn lambdas(&self) -> ArrayView1<'_, f64> {
        self.lambdas.view()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn eps_var(&self) -> f64 {
        self.eps_var
    }

    /// Same model with one basis row negated. Eigenvectors are only defined up to sign.
    pub fn with_flipped_row(&self, row: usize) -> Self {
        let mut flipped = self.clone();
        flipped.basis_v.row_mut(row).mapv_inplace(|x| -x);
        flipped
    }

    fn check_dim(&self, features: &FeatureMatrix) -> Result<()> {
        if features.cols() != self.dim_d() {
            return Err(PscError::DimMismatch { expected: self.dim_d(), got: features.cols() });
        }
        Ok(())
    }

    fn centered(&self, features: &FeatureMatrix) -> Array2<f64> {
        features.as_array() - &self.mu_s.view().insert_axis(Axis(0))
    }

    pub fn project_support(&self, features: &FeatureMatrix) -> Result<SupportCoords> {
        self.check_dim(features)?;
        Ok(SupportCoords(self.centered(features).dot(&self.basis_v.t())))
    }

    pub fn project_residual(&self, features: &FeatureMatrix) -> Result<ResidualCoords> {
        self.check_dim(features)?;
        let (_, residual) = self.decompose(features)?;
        Ok(residual)
    }

    /// Support and residual parts computed together from one centering pass.
    pub fn decompose(&self, features: &FeatureMatrix) -> Result<(SupportCoords, ResidualCoords)> {
        self.check_dim(features)?;
        let centered = self.centered(features);
        let u = centered.dot(&self.basis_v.t());
        let r = &centered - &u.dot(&self.basis_v);
        Ok((SupportCoords(u), ResidualCoords { data: r, dim_residual: self.dim_residual() }))
    }

    /// `a = V w`, the head expressed in support coordinates.
    pub fn head_support(&self, w: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if w.len() != self.dim_d() {
            return Err(PscError::DimMismatch { expected: self.dim_d(), got: w.len() });
        }
        Ok(self.basis_v.dot(&w))
    }

    /// `P_⊥ x = x − Vᵀ V x`.
    pub fn complement_part(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if x.len() != self.dim_d() {
            return Err(PscError::DimMismatch { expected: self.dim_d(), got: x.len() });
        }
        let coords = self.basis_v.dot(&x);
        Ok(&x - &self.basis_v.t().dot(&coords))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            version: MODEL_FILE_VERSION,
            d: self.dim_d(),
            k: self.dim_k(),
            mu_s: self.mu_s.to_vec(),
            basis_v: self.basis_v.rows().into_iter().map(|r| r.to_vec()).collect(),
            lambdas: self.lambdas.to_vec(),
            tau: self.tau,
            eps_var: self.eps_var,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.version != MODEL_FILE_VERSION {
            return Err(PscError::UnsupportedVersion(file.version));
        }
        if file.mu_s.len() != file.d {
            return Err(PscError::DimMismatch { expected: file.d, got: file.mu_s.len() });
        }
        if file.basis_v.len() != file.k {
            return Err(PscError::DimMismatch { expected: file.k, got: file.basis_v.len() });
        }
        let mut basis = Array2::zeros((file.k, file.d));
        for (i, row) in file.basis_v.iter().enumerate() {
            if row.len() != file.d {
                return Err(PscError::DimMismatch { expected: file.d, got: row.len() });
            }
            basis.row_mut(i).assign(&ArrayView1::from(row.as_slice()));
        }
        Self::from_parts(
            Array1::from(file.mu_s),
            basis,
            Array1::from(file.lambdas),
            file.tau,
            file.eps_var,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

// serde_json writes the shortest decimal that parses back to the same f64
// (never more than 17 significant digits), so save → load is bit-exact.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    d: usize,
    k: usize,
    mu_s: Vec<f64>,
    basis_v: Vec<Vec<f64>>,
    lambdas: Vec<f64>,
    tau: f64,
    eps_var: f64,
}

/// Column mean of a feature batch.
pub fn column_mean(features: &FeatureMatrix) -> Array1<f64> {
    features.as_array().mean_axis(Axis(0)).expect("non-empty batch")
}

/// Unbiased (1/(B−1)) sample covariance.
pub fn sample_covariance(features: &FeatureMatrix) -> Result<Array2<f64>> {
    let b = features.rows();
    if b < 2 {
        return Err(PscError::TooFewSamples { needed: 2, got: b });
    }
    let mean = column_mean(features);
    let centered = features.as_array() - &mean.view().insert_axis(Axis(0));
    let mut cov = centered.t().dot(&centered) / (b as f64 - 1.0);
    let d = cov.nrows();
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (cov[[i, j]] + cov[[j, i]]);
            cov[[i, j]] = avg;
            cov[[j, i]] = avg;
        }
    }
    Ok(cov)
}

/// Fit the block spectral model on source features.
pub fn fit_source_model(
    features: &FeatureMatrix,
    select: KSelection,
    eps_var: f64,
) -> Result<SourceSpectralModel> {
    let b = features.rows();
    let d = features.cols();
    if b < 2 {
        return Err(PscError::TooFewSamples { needed: 2, got: b });
    }
    if d < 2 {
        return Err(PscError::InvalidK { k: 1, d });
    }
    if !(eps_var > 0.0) {
        return Err(PscError::InvalidModel(format!("eps_var {eps_var} must be positive")));
    }
    let mu_s = column_mean(features);
    let cov = sample_covariance(features)?;
    let eig = symmetric_eigen(cov.view())?;
    let k = select.resolve(eig.values.view())?;

    let mut basis_v = Array2::zeros((k, d));
    for i in 0..k {
        basis_v.row_mut(i).assign(&eig.vectors.column(i));
    }
    let lambdas = eig.values.slice(ndarray::s![..k]).mapv(|l| l.max(eps_var));
    let tail = eig.values.slice(ndarray::s![k..]);
    let tau = (tail.sum() / tail.len() as f64).max(eps_var);
    SourceSpectralModel::from_parts(mu_s, basis_v, lambdas, tau, eps_var)
}
