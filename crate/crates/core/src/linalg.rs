//! Dense linear-algebra helpers shared by the fitting and moment code.
//!
//! Everything here works on `nalgebra` dynamic matrices. The central piece is
//! [`PenalisedDesign`], which profiles unpenalised columns out of a weighted
//! design so that every downstream computation only sees the penalised block.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{EcpcError, Result};

/// Relative eigenvalue cut-off below which a direction counts as null.
const NULL_EIGEN_REL: f64 = 1e-12;

pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > 0.0 && n >= 1);
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

pub fn select_columns(x: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), cols.len(), |i, j| x[(i, cols[j])])
}

pub fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

/// Symmetric eigendecomposition with eigenvalues sorted descending.
pub fn sym_eigen_sorted(m: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = DVector::from_fn(n, |i, _| eig.eigenvalues[order[i]]);
    let vecs = DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    (vals, vecs)
}

/// Orthonormal basis (n × (n − rank)) of the orthogonal complement of the
/// column space of `a`.
pub fn orthogonal_complement(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    if a.ncols() == 0 {
        return DMatrix::identity(n, n);
    }
    let gram = a * a.transpose();
    let (vals, vecs) = sym_eigen_sorted(gram);
    let top = vals.iter().cloned().fold(0.0_f64, f64::max).max(f64::MIN_POSITIVE);
    let keep: Vec<usize> = (0..n).filter(|&i| vals[i] <= top * 1e-10).collect();
    select_columns(&vecs, &keep)
}

/// Solve a symmetric positive (semi)definite system, falling back to a
/// pseudo-inverse when Cholesky fails.
pub fn solve_spd(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = Cholesky::new(m.clone()) {
        return Ok(ch.solve(rhs));
    }
    least_squares_min_norm(m, rhs)
}

pub fn solve_spd_mat(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = Cholesky::new(m.clone()) {
        return Ok(ch.solve(rhs));
    }
    let pinv = m
        .clone()
        .pseudo_inverse(1e-12 * max_abs(m).max(f64::MIN_POSITIVE))
        .map_err(|e| EcpcError::Singular(e.to_string()))?;
    Ok(pinv * rhs)
}

/// Minimum-norm least-squares solution of `a x ≈ b` via the SVD.
pub fn least_squares_min_norm(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.ncols() == 0 {
        return Ok(DVector::zeros(0));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let eps = smax * 1e-12 * (a.nrows().max(a.ncols()) as f64);
    svd.solve(b, eps).map_err(|e| EcpcError::Singular(e.to_string()))
}

/// Numerical rank of `a` with the same cut-off as [`least_squares_min_norm`].
pub fn rank(a: &DMatrix<f64>) -> usize {
    if a.ncols() == 0 || a.nrows() == 0 {
        return 0;
    }
    let sv = a.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    let eps = smax * 1e-12 * (a.nrows().max(a.ncols()) as f64);
    sv.iter().filter(|&&s| s > eps).count()
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Penalised block of a weighted design with unpenalised columns profiled out.
///
/// For weights `W` (diagonal), unpenalised columns `X_U` and penalised columns
/// `X_P`, the rows of `f` are `Nᵀ W^{1/2} X_P` where `N` spans the orthogonal
/// complement of `W^{1/2} X_U`. Then `fᵀ f = X_Pᵀ W̄ X_P` with the
/// projection-adjusted weight matrix
/// `W̄ = W − W X_U (X_Uᵀ W X_U)⁻¹ X_Uᵀ W`, which is exactly the Schur
/// complement governing the penalised block.
#[derive(Debug, Clone)]
pub struct PenalisedDesign {
    pub pen_idx: Vec<usize>,
    pub unpen_idx: Vec<usize>,
    /// `r × m` whitened, profiled penalised design.
    pub f: DMatrix<f64>,
    /// `n × r` basis: complement of `W^{1/2} X_U` (identity when no unpenalised columns).
    pub basis: Option<DMatrix<f64>>,
    pub sqrt_w: DVector<f64>,
}

impl PenalisedDesign {
    pub fn new(x: &DMatrix<f64>, w: &DVector<f64>, unpenalized: &[bool]) -> Result<Self> {
        let n = x.nrows();
        if w.len() != n || unpenalized.len() != x.ncols() {
            return Err(EcpcError::dim("design, weights and penalty mask disagree"));
        }
        let pen_idx: Vec<usize> = (0..x.ncols()).filter(|&j| !unpenalized[j]).collect();
        let unpen_idx: Vec<usize> = (0..x.ncols()).filter(|&j| unpenalized[j]).collect();
        let sqrt_w = w.map(|v| v.max(0.0).sqrt());
        let mut wx_p = select_columns(x, &pen_idx);
        for i in 0..n {
            wx_p.row_mut(i).scale_mut(sqrt_w[i]);
        }
        if unpen_idx.is_empty() {
            return Ok(Self { pen_idx, unpen_idx, f: wx_p, basis: None, sqrt_w });
        }
        let mut wx_u = select_columns(x, &unpen_idx);
        for i in 0..n {
            wx_u.row_mut(i).scale_mut(sqrt_w[i]);
        }
        let basis = orthogonal_complement(&wx_u);
        let f = basis.transpose() * wx_p;
        Ok(Self { pen_idx, unpen_idx, f, basis: Some(basis), sqrt_w })
    }

    /// Map an n-vector `z` to the whitened, profiled coordinates `Nᵀ W^{1/2} z`.
    pub fn project(&self, z: &DVector<f64>) -> DVector<f64> {
        let wz = z.component_mul(&self.sqrt_w);
        match &self.basis {
            Some(b) => b.transpose() * wz,
            None => wz,
        }
    }
}

/// Thin eigen-factorisation of `F̃ᵀ F̃` where `F̃ = F Ω^{-1/2}`:
/// returns `(h, d2)` with `F̃ᵀ F̃ = h hᵀ` restricted to the non-null spectrum
/// and `d2` the matching squared singular values, so that `h[:, j] = V_j d_j`.
pub fn scaled_gram_factor(f: &DMatrix<f64>, omega: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let (r, m) = f.shape();
    let mut ft = f.clone();
    for j in 0..m {
        ft.column_mut(j).scale_mut(1.0 / omega[j].sqrt());
    }
    if m <= r {
        let (vals, vecs) = sym_eigen_sorted(ft.transpose() * &ft);
        let top = vals.iter().cloned().fold(0.0_f64, f64::max);
        let keep: Vec<usize> = (0..m).filter(|&j| vals[j] > top * NULL_EIGEN_REL && vals[j] > 0.0).collect();
        let d2 = DVector::from_iterator(keep.len(), keep.iter().map(|&j| vals[j]));
        let h = DMatrix::from_fn(m, keep.len(), |k, j| vecs[(k, keep[j])] * d2[j].sqrt());
        (h, d2)
    } else {
        let (vals, vecs) = sym_eigen_sorted(&ft * ft.transpose());
        let top = vals.iter().cloned().fold(0.0_f64, f64::max);
        let keep: Vec<usize> = (0..r).filter(|&j| vals[j] > top * NULL_EIGEN_REL && vals[j] > 0.0).collect();
        let d2 = DVector::from_iterator(keep.len(), keep.iter().map(|&j| vals[j]));
        let u = select_columns(&vecs, &keep);
        let h = ft.transpose() * u;
        (h, d2)
    }
}
