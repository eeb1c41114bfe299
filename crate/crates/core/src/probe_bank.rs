//! The fixed K² probe bank: K axis directions plus the normalised sum and
//! difference of every pair of axes.
//!
//! One-dimensional means and variances along these probes determine the
//! full mean vector and covariance matrix of the support coordinates;
//! [`recover_moments`] makes that explicit.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{PscError, Result};
use crate::spectral_model::SupportCoords;

/// Which member of the bank a probe is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Axis(usize),
    PairPlus(usize, usize),
    PairMinus(usize, usize),
}

impl ProbeKind {
    pub fn is_axis(self) -> bool {
        matches!(self, ProbeKind::Axis(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeBank {
    k: usize,
    probes: Vec<Array1<f64>>,
    kinds: Vec<ProbeKind>,
}

impl ProbeBank {
    /// Axis probes by index, then pair probes by `(i, j)` in lexicographic
    /// order with the `+` probe before the `−` probe. The ordering is stable
    /// across runs so per-probe breakdowns line up.
    pub fn build(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(PscError::InvalidK { k, d: 0 });
        }
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let mut probes = Vec::with_capacity(k * k);
        let mut kinds = Vec::with_capacity(k * k);
        for i in 0..k {
            let mut e = Array1::zeros(k);
            e[i] = 1.0;
            probes.push(e);
            kinds.push(ProbeKind::Axis(i));
        }
        for i in 0..k {
            for j in (i + 1)..k {
                let mut plus = Array1::zeros(k);
                plus[i] = h;
                plus[j] = h;
                let mut minus = Array1::zeros(k);
                minus[i] = h;
                minus[j] = -h;
                probes.push(plus);
                kinds.push(ProbeKind::PairPlus(i, j));
                probes.push(minus);
                kinds.push(ProbeKind::PairMinus(i, j));
            }
        }
        Ok(Self { k, probes, kinds })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }

    pub fn probes(&self) -> &[Array1<f64>] {
        &self.probes
    }

    pub fn kinds(&self) -> &[ProbeKind] {
        &self.kinds
    }

    pub fn iter(&self) -> impl Iterator<Item = (ProbeKind, &Array1<f64>)> {
        self.kinds.iter().copied().zip(self.probes.iter())
    }

    /// Position of `axis(i)` in the bank.
    pub fn axis_index(&self, i: usize) -> usize {
        i
    }

    /// Position of `pair_plus(i, j)`; `pair_minus(i, j)` follows it. Requires `i < j`.
    pub fn pair_index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < self.k);
        // Pairs before row i: sum over r < i of (k − 1 − r).
        let before = i * (2 * self.k - i - 1) / 2 + (j - i - 1);
        self.k + 2 * before
    }

    /// Stack the probes as rows of a `K² × K` matrix.
    pub fn as_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.len(), self.k));
        for (row, p) in self.probes.iter().enumerate() {
            m.row_mut(row).assign(p);
        }
        m
    }
}

/// Per-probe projected means and (clamped) variances of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeMoments {
    pub means: Array1<f64>,
    pub vars: Array1<f64>,
    /// Entries whose raw variance fell below the clamp floor.
    pub clamped: Vec<bool>,
}

impl ProbeMoments {
    pub fn any_clamped(&self) -> bool {
        self.clamped.iter().any(|&c| c)
    }
}

/// Batch mean and biased (1/B) variance of `qᵀu_i` for every probe, with
/// variances clamped to at least `eps_var`.
pub fn probe_moments(bank: &ProbeBank, coords: &SupportCoords, eps_var: f64) -> Result<ProbeMoments> {
    if coords.cols() != bank.k() {
        return Err(PscError::DimMismatch { expected: bank.k(), got: coords.cols() });
    }
    let b = coords.rows();
    if b < 2 {
        return Err(PscError::TooFewSamples { needed: 2, got: b });
    }
    let projections = coords.0.dot(&bank.as_matrix().t());
    let n = b as f64;
    let mut means = Array1::zeros(bank.len());
    let mut vars = Array1::zeros(bank.len());
    let mut clamped = vec![false; bank.len()];
    for (q, col) in projections.columns().into_iter().enumerate() {
        let m = col.sum() / n;
        let v = col.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / n;
        means[q] = m;
        if v < eps_var {
            vars[q] = eps_var;
            clamped[q] = true;
        } else {
            vars[q] = v;
        }
    }
    Ok(ProbeMoments { means, vars, clamped })
}

/// Source variance `qᵀΛq` along every probe for diagonal `Λ`.
pub fn source_probe_variance(bank: &ProbeBank, lambdas: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if lambdas.len() != bank.k() {
        return Err(PscError::DimMismatch { expected: bank.k(), got: lambdas.len() });
    }
    Ok(bank
        .kinds()
        .iter()
        .map(|kind| match *kind {
            ProbeKind::Axis(i) => lambdas[i],
            ProbeKind::PairPlus(i, j) | ProbeKind::PairMinus(i, j) => 0.5 * (lambdas[i] + lambdas[j]),
        })
        .collect())
}

/// Reconstruct the mean vector and covariance matrix from probe moments.
///
/// Means come from the axis probes, diagonal variances from the axis probes
/// and each off-diagonal entry from `½(Var(q⁺ᵢⱼ) − Var(q⁻ᵢⱼ))`.
pub fn recover_moments(bank: &ProbeBank, moments: &ProbeMoments) -> (Array1<f64>, Array2<f64>) {
    let k = bank.k();
    let mut mu = Array1::zeros(k);
    let mut sigma = Array2::zeros((k, k));
    for i in 0..k {
        let a = bank.axis_index(i);
        mu[i] = moments.means[a];
        sigma[[i, i]] = moments.vars[a];
    }
    for i in 0..k {
        for j in (i + 1)..k {
            let p = bank.pair_index(i, j);
            let s = 0.5 * (moments.vars[p] - moments.vars[p + 1]);
            sigma[[i, j]] = s;
            sigma[[j, i]] = s;
        }
    }
    (mu, sigma)
}
