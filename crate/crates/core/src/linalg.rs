//! Dense symmetric linear algebra used by the spectral model and the theory checks.
//!
//! The eigensolver is a cyclic Jacobi iteration. It is slower than a
//! tridiagonal QR for large matrices but unconditionally stable for real
//! symmetric input and fully deterministic, which is what a frozen source
//! model needs at the dimensions handled here (D up to a few hundred).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{PscError, Result};

/// Sweep cap for the cyclic Jacobi iteration.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Convergence threshold on the max off-diagonal entry, relative to the Frobenius norm.
pub const JACOBI_REL_TOL: f64 = 1e-12;
/// Relative asymmetry accepted by [`symmetric_eigen`].
pub const SYMMETRY_REL_TOL: f64 = 1e-12;

/// Eigen-decomposition `A = V diag(values) Vᵀ` with eigenvectors stored as columns.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Eigenvalues in non-increasing order.
    pub values: Array1<f64>,
    /// Orthonormal eigenvectors, column `k` pairs with `values[k]`.
    pub vectors: Array2<f64>,
}

impl SymmetricEigen {
    /// Rebuild `V diag(values) Vᵀ`.
    pub fn reconstruct(&self) -> Array2<f64> {
        let scaled = &self.vectors * &self.values.view().insert_axis(Axis(0));
        scaled.dot(&self.vectors.t())
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn frobenius_norm(a: ArrayView2<'_, f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Eigenvalues are returned in descending order (ties keep the original
/// column order). Each eigenvector is sign-normalised so that its
/// largest-magnitude entry is positive, ties broken by the lowest index.
pub fn symmetric_eigen(matrix: ArrayView2<'_, f64>) -> Result<SymmetricEigen> {
    let n = matrix.nrows();
    if matrix.ncols() != n {
        return Err(PscError::DimMismatch { expected: n, got: matrix.ncols() });
    }
    if matrix.iter().any(|x| !x.is_finite()) {
        return Err(PscError::NonFinite { context: "symmetric_eigen input" });
    }
    let norm = frobenius_norm(matrix);
    let mut asymmetry = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asymmetry = asymmetry.max((matrix[[i, j]] - matrix[[j, i]]).abs());
        }
    }
    if asymmetry > SYMMETRY_REL_TOL * norm {
        return Err(PscError::NonSymmetric { asymmetry });
    }

    // Work on the exactly symmetrised copy.
    let mut a = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        a[[i, i]] = matrix[[i, i]];
        for j in (i + 1)..n {
            let v = 0.5 * (matrix[[i, j]] + matrix[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
    let mut v = Array2::<f64>::eye(n);
    let tol = JACOBI_REL_TOL * norm;

    let max_off = |a: &Array2<f64>| {
        let mut m = 0.0_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                m = m.max(a[[i, j]].abs());
            }
        }
        m
    };

    let mut converged = false;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if max_off(&a) <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                a[[p, p]] -= t * apq;
                a[[q, q]] += t * apq;
                a[[p, q]] = 0.0;
                a[[q, p]] = 0.0;
                for r in 0..n {
                    if r != p && r != q {
                        let arp = a[[r, p]];
                        let arq = a[[r, q]];
                        let new_rp = c * arp - s * arq;
                        let new_rq = s * arp + c * arq;
                        a[[r, p]] = new_rp;
                        a[[p, r]] = new_rp;
                        a[[r, q]] = new_rq;
                        a[[q, r]] = new_rq;
                    }
                }
                for r in 0..n {
                    let vrp = v[[r, p]];
                    let vrq = v[[r, q]];
                    v[[r, p]] = c * vrp - s * vrq;
                    v[[r, q]] = s * vrp + c * vrq;
                }
            }
        }
    }
    if !converged {
        let off = max_off(&a);
        if off > tol {
            return Err(PscError::NoConvergence { sweeps: JACOBI_MAX_SWEEPS, off_diagonal: off });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the original column order among equal eigenvalues.
    order.sort_by(|&i, &j| a[[j, j]].partial_cmp(&a[[i, i]]).expect("finite eigenvalues"));

    let mut values = Array1::<f64>::zeros(n);
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = a[[src, src]];
        let mut col = v.column(src).to_owned();
        normalize_sign(&mut col);
        vectors.column_mut(dst).assign(&col);
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Flip `v` so its largest-magnitude entry (lowest index on ties) is positive.
pub fn normalize_sign(v: &mut Array1<f64>) {
    let mut best = 0;
    let mut best_abs = -1.0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > best_abs {
            best_abs = x.abs();
            best = i;
        }
    }
    if v.len() > 0 && v[best] < 0.0 {
        v.mapv_inplace(|x| -x);
    }
}

/// Inverse of a symmetric positive definite matrix through its eigen-decomposition.
pub fn spd_inverse(eig: &SymmetricEigen) -> Array2<f64> {
    let inv = eig.values.mapv(|l| 1.0 / l);
    let scaled = &eig.vectors * &inv.view().insert_axis(Axis(0));
    scaled.dot(&eig.vectors.t())
}

/// Matrix of i.i.d. standard normal entries.
pub fn standard_normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

/// Orthonormalise the columns of `m` with modified Gram-Schmidt (the Q factor of a thin QR).
///
/// Columns that become numerically dependent are left as zero.
pub fn orthonormal_columns(m: &Array2<f64>) -> Array2<f64> {
    let mut q = m.clone();
    for j in 0..q.ncols() {
        for i in 0..j {
            let proj = q.column(i).dot(&q.column(j));
            let qi = q.column(i).to_owned();
            q.column_mut(j).scaled_add(-proj, &qi);
        }
        let n = q.column(j).dot(&q.column(j)).sqrt();
        if n > 1e-300 {
            q.column_mut(j).mapv_inplace(|x| x / n);
        } else {
            q.column_mut(j).fill(0.0);
        }
    }
    q
}

/// Random `dim × dim` orthogonal matrix (Q factor of a Gaussian matrix).
pub fn random_orthogonal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Array2<f64> {
    orthonormal_columns(&standard_normal_matrix(dim, dim, rng))
}

/// Random symmetric positive definite matrix `Q diag(d) Qᵀ` with `d` uniform on `[lo, hi]`.
pub fn random_spd<R: Rng + ?Sized>(dim: usize, lo: f64, hi: f64, rng: &mut R) -> Array2<f64> {
    let q = random_orthogonal(dim, rng);
    let d = Array1::from_shape_simple_fn(dim, || rng.random_range(lo..=hi));
    let scaled = &q * &d.view().insert_axis(Axis(0));
    let mut s = scaled.dot(&q.t());
    // Exact symmetry keeps downstream symmetric checks trivially satisfied.
    for i in 0..dim {
        for j in (i + 1)..dim {
            let avg = 0.5 * (s[[i, j]] + s[[j, i]]);
            s[[i, j]] = avg;
            s[[j, i]] = avg;
        }
    }
    s
}
