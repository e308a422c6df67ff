//! Moment-based linear systems for group prior variances, group means and
//! grouping weights.
//!
//! Everything is built from the moment core
//! `C = (XᵀWX + Ω)⁻¹XᵀWX` and `v = diag((XᵀWX + Ω)⁻¹XᵀWX(XᵀWX + Ω)⁻¹)`,
//! restricted to the penalised covariates. Unpenalised columns are profiled
//! out of the weighted design first; the penalised block of `C` then only
//! depends on the projected design, and the columns of `C` belonging to
//! unpenalised covariates are unit vectors that never enter a system.
//!
//! `C` is represented through a thin factor `H` of the scaled Gram matrix, so
//! the `m × m` matrix is only materialised when `m` is below a threshold.
//! Group systems are assembled from row sums of `C.²Z`, computed one row at a
//! time when `C` is not stored.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::codata::{CoDataMatrix, GroupSplit, Grouping};
use crate::error::{EcpcError, Result};
use crate::linalg::{condition_number, scaled_gram_factor, select_columns, solve_spd_mat, PenalisedDesign};

/// Penalised-covariate count above which `C` is never stored densely.
pub const DEFAULT_DENSE_LIMIT: usize = 5000;

#[derive(Debug, Clone)]
pub struct MomentCore {
    pub p: usize,
    pub pen_idx: Vec<usize>,
    pub unpen_idx: Vec<usize>,
    /// Precision of the penalised covariates used in the initial fit.
    pub omega: Vec<f64>,
    /// `m × q` factor with `F̃ᵀF̃ = H Hᵀ`, `F̃ = F Ω^{-1/2}`.
    pub h: DMatrix<f64>,
    /// `1/(1 + d_j²)` for each retained eigen-direction.
    pub shrink: DVector<f64>,
    /// Variance term, penalised covariates only.
    pub v: Vec<f64>,
    /// Initial estimate restricted to the penalised covariates.
    pub beta_tilde: Vec<f64>,
    /// Initial estimate over all covariates.
    pub beta_tilde_full: Vec<f64>,
    c_pp: Option<DMatrix<f64>>,
    c_up: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoreOptions {
    pub dense_limit: usize,
}

impl Default for CoreOptions {
    fn default() -> Self {
        Self { dense_limit: DEFAULT_DENSE_LIMIT }
    }
}

/// Build the moment core from the design, the GLM weights at the initial
/// fit, the precision of that fit (zero marks an unpenalised covariate) and
/// the initial estimate itself.
pub fn compute_moment_core(
    x: &DMatrix<f64>,
    w: &[f64],
    precision: &[f64],
    beta_tilde: &[f64],
    opts: &CoreOptions,
) -> Result<MomentCore> {
    let (n, p) = x.shape();
    if w.len() != n || precision.len() != p || beta_tilde.len() != p {
        return Err(EcpcError::dim("moment core inputs disagree in size"));
    }
    if let Some(k) = precision.iter().position(|&o| !(o >= 0.0 && o.is_finite())) {
        return Err(EcpcError::invalid(format!("precision of covariate {} is {}", k + 1, precision[k])));
    }
    if let Some(i) = w.iter().position(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(EcpcError::invalid(format!("weight of sample {} is {}", i + 1, w[i])));
    }
    let unpenalized: Vec<bool> = precision.iter().map(|&o| o == 0.0).collect();
    let wv = DVector::from_column_slice(w);
    let design = PenalisedDesign::new(x, &wv, &unpenalized)?;
    if design.pen_idx.is_empty() {
        return Err(EcpcError::invalid("moment core needs at least one penalised covariate"));
    }
    let omega: Vec<f64> = design.pen_idx.iter().map(|&k| precision[k]).collect();
    let m = omega.len();
    if !design.unpen_idx.is_empty() {
        let mut wx_u = select_columns(x, &design.unpen_idx);
        for i in 0..n {
            wx_u.row_mut(i).scale_mut(design.sqrt_w[i]);
        }
        let gram = wx_u.transpose() * &wx_u;
        let cond = condition_number(&gram);
        if !(cond < 1e12) {
            return Err(EcpcError::Singular(format!(
                "unpenalised block of XᵀWX is singular (condition number {cond:.3e})"
            )));
        }
    }
    let (h, d2) = scaled_gram_factor(&design.f, &omega);
    let shrink = d2.map(|d| 1.0 / (1.0 + d));
    let v: Vec<f64> = (0..m)
        .map(|k| {
            let s: f64 = (0..h.ncols()).map(|j| h[(k, j)] * h[(k, j)] * shrink[j] * shrink[j]).sum();
            s / omega[k]
        })
        .collect();
    let beta_pen: Vec<f64> = design.pen_idx.iter().map(|&k| beta_tilde[k]).collect();
    let mut core = MomentCore {
        p,
        pen_idx: design.pen_idx.clone(),
        unpen_idx: design.unpen_idx.clone(),
        omega,
        h,
        shrink,
        v,
        beta_tilde: beta_pen,
        beta_tilde_full: beta_tilde.to_vec(),
        c_pp: None,
        c_up: None,
    };
    if m <= opts.dense_limit {
        let c = core.dense_from_factor();
        if !core.unpen_idx.is_empty() {
            let mut xw_u = select_columns(x, &core.unpen_idx);
            for i in 0..n {
                xw_u.row_mut(i).scale_mut(w[i]);
            }
            let x_u = select_columns(x, &core.unpen_idx);
            let x_p = select_columns(x, &core.pen_idx);
            let a_uu = xw_u.transpose() * x_u;
            let a_up = xw_u.transpose() * x_p;
            let i_minus_c = DMatrix::identity(m, m) - &c;
            core.c_up = Some(solve_spd_mat(&a_uu, &(a_up * i_minus_c))?);
        }
        core.c_pp = Some(c);
    }
    Ok(core)
}

impl MomentCore {
    /// Number of penalised covariates.
    pub fn m(&self) -> usize {
        self.pen_idx.len()
    }

    pub fn is_dense(&self) -> bool {
        self.c_pp.is_some()
    }

    fn dense_from_factor(&self) -> DMatrix<f64> {
        let m = self.m();
        let mut hs = self.h.clone();
        for j in 0..hs.ncols() {
            hs.column_mut(j).scale_mut(self.shrink[j]);
        }
        let mut c = hs * self.h.transpose();
        for k in 0..m {
            let a = self.omega[k].sqrt();
            for l in 0..m {
                c[(k, l)] *= self.omega[l].sqrt() / a;
            }
        }
        c
    }

    /// Row `k` of the penalised block of `C` (penalised index space).
    pub fn c_row(&self, k: usize) -> DVector<f64> {
        if let Some(c) = &self.c_pp {
            return c.row(k).transpose();
        }
        let q = self.h.ncols();
        let u = DVector::from_fn(q, |j, _| self.h[(k, j)] * self.shrink[j]);
        let mut row = &self.h * u;
        let a = self.omega[k].sqrt();
        for l in 0..row.len() {
            row[l] *= self.omega[l].sqrt() / a;
        }
        row
    }

    /// Penalised block of `C`, materialised on demand.
    pub fn c_penalised(&self) -> DMatrix<f64> {
        match &self.c_pp {
            Some(c) => c.clone(),
            None => self.dense_from_factor(),
        }
    }

    /// Full `p × p` matrix `C` in the original covariate order. Requires the
    /// dense representation when unpenalised covariates are present.
    pub fn c_full(&self) -> Result<DMatrix<f64>> {
        let c_pp = self.c_penalised();
        let mut c = DMatrix::zeros(self.p, self.p);
        for (a, &k) in self.pen_idx.iter().enumerate() {
            for (b, &l) in self.pen_idx.iter().enumerate() {
                c[(k, l)] = c_pp[(a, b)];
            }
        }
        if !self.unpen_idx.is_empty() {
            let c_up = self
                .c_up
                .as_ref()
                .ok_or_else(|| EcpcError::invalid("unpenalised rows of C are only kept in dense mode"))?;
            for (a, &k) in self.unpen_idx.iter().enumerate() {
                for (b, &l) in self.pen_idx.iter().enumerate() {
                    c[(k, l)] = c_up[(a, b)];
                }
            }
            for &l in &self.unpen_idx {
                c[(l, l)] = 1.0;
            }
        }
        Ok(c)
    }

    /// `C.² Z` (penalised rows), `m × G`.
    pub fn squared_times(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        if let Some(c) = &self.c_pp {
            return c.map(|v| v * v) * z;
        }
        self.rowwise(z, true)
    }

    /// `C Z` (penalised rows), `m × G`.
    pub fn times(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        if let Some(c) = &self.c_pp {
            return c * z;
        }
        self.rowwise(z, false)
    }

    fn rowwise(&self, z: &DMatrix<f64>, squared: bool) -> DMatrix<f64> {
        let m = self.m();
        let g = z.ncols();
        let rows: Vec<Vec<f64>> = (0..m)
            .into_par_iter()
            .map(|k| {
                let mut r = self.c_row(k);
                if squared {
                    r.apply(|v| *v = *v * *v);
                }
                (z.transpose() * r).iter().copied().collect()
            })
            .collect();
        DMatrix::from_fn(m, g, |k, j| rows[k][j])
    }
}

/// A group-level linear system `A x = b`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub group_labels: Vec<String>,
    /// Source group of each equation (row).
    pub rows: Vec<usize>,
}

impl MomentSystem {
    fn checked(self) -> Result<Self> {
        if self.a.iter().chain(self.b.iter()).any(|v| !v.is_finite()) {
            return Err(EcpcError::Numeric("moment system has non-finite entries".into()));
        }
        Ok(self)
    }

    /// Multiply `A` by a scalar (e.g. the global prior variance, turning a
    /// system in `τ = τ²_global γ` into one in `γ`).
    pub fn scaled(&self, s: f64) -> Self {
        Self { a: &self.a * s, ..self.clone() }
    }

    pub fn n_equations(&self) -> usize {
        self.a.nrows()
    }

    /// Keep the listed unknowns (columns) only.
    pub fn restrict_columns(&self, cols: &[usize]) -> Self {
        Self {
            a: select_columns(&self.a, cols),
            b: self.b.clone(),
            group_labels: cols.iter().map(|&c| self.group_labels[c].clone()).collect(),
            rows: self.rows.clone(),
        }
    }
}

/// Optional non-zero prior-mean terms for the variance system.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMean {
    /// Target used in the initial fit, per penalised covariate.
    pub mu_tilde: Vec<f64>,
    /// Group means.
    pub mu_group: Vec<f64>,
}

fn check_grouping(core: &MomentCore, grouping: &Grouping, z: &CoDataMatrix) -> Result<()> {
    if grouping.p != core.m() || z.p() != core.m() {
        return Err(EcpcError::dim(format!(
            "grouping '{}' indexes {} covariates but {} are penalised",
            grouping.name,
            grouping.p,
            core.m()
        )));
    }
    if z.n_groups() != grouping.n_groups() {
        return Err(EcpcError::dim("co-data matrix and grouping disagree on the group count"));
    }
    if let Some(g) = grouping.groups.iter().position(|g| g.is_empty()) {
        return Err(EcpcError::invalid(format!("group {} of '{}' is empty", g + 1, grouping.name)));
    }
    Ok(())
}

/// Average the rows of `m` over each index set; empty sets are skipped.
fn average_rows(sets: &[Vec<usize>], m: &DMatrix<f64>, e: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>, Vec<usize>) {
    let kept: Vec<usize> = (0..sets.len()).filter(|&g| !sets[g].is_empty()).collect();
    let mut a = DMatrix::zeros(kept.len(), m.ncols());
    let mut b = DVector::zeros(kept.len());
    for (r, &g) in kept.iter().enumerate() {
        let inv = 1.0 / sets[g].len() as f64;
        for &k in &sets[g] {
            for j in 0..m.ncols() {
                a[(r, j)] += m[(k, j)];
            }
            b[r] += e[k];
        }
        a.row_mut(r).scale_mut(inv);
        b[r] *= inv;
    }
    (a, b, kept)
}

/// Per-covariate right-hand side `β̃² − v − ([I − C]μ̃ + CZμ).²`.
fn variance_rhs(core: &MomentCore, z: &CoDataMatrix, prior_mean: Option<&PriorMean>) -> Result<DVector<f64>> {
    let m = core.m();
    let mut e = DVector::from_fn(m, |k, _| core.beta_tilde[k] * core.beta_tilde[k] - core.v[k]);
    if let Some(pm) = prior_mean {
        if pm.mu_tilde.len() != m || pm.mu_group.len() != z.n_groups() {
            return Err(EcpcError::dim("prior mean vectors have the wrong length"));
        }
        let mt = DVector::from_column_slice(&pm.mu_tilde);
        let zmu = &z.entries * DVector::from_column_slice(&pm.mu_group);
        let both = DMatrix::from_fn(m, 2, |k, j| if j == 0 { mt[k] } else { zmu[k] });
        let cb = core.times(&both);
        for k in 0..m {
            let t = mt[k] - cb[(k, 0)] + cb[(k, 1)];
            e[k] -= t * t;
        }
    }
    Ok(e)
}

/// Variance system `A = P C.² Z`, `b = P(β̃² − v)` with `P` the group-average
/// operator. The unknown is `τ²_global γ`.
pub fn build_variance_system(
    core: &MomentCore,
    z: &CoDataMatrix,
    grouping: &Grouping,
    prior_mean: Option<&PriorMean>,
) -> Result<MomentSystem> {
    check_grouping(core, grouping, z)?;
    let m2z = core.squared_times(&z.entries);
    let e = variance_rhs(core, z, prior_mean)?;
    let (a, b, rows) = average_rows(&grouping.groups, &m2z, &e);
    MomentSystem { a, b, group_labels: grouping.group_names.clone(), rows }.checked()
}

/// First-moment system `A_μ = P C Z`, `b_μ = P[β̃ − (I − C)μ̃]`.
pub fn build_mean_system(
    core: &MomentCore,
    z: &CoDataMatrix,
    grouping: &Grouping,
    mu_tilde: Option<&[f64]>,
) -> Result<MomentSystem> {
    check_grouping(core, grouping, z)?;
    let m = core.m();
    let cz = core.times(&z.entries);
    let mut e = DVector::from_column_slice(&core.beta_tilde);
    if let Some(mt) = mu_tilde {
        if mt.len() != m {
            return Err(EcpcError::dim("prior mean target has the wrong length"));
        }
        let mtv = DMatrix::from_column_slice(m, 1, mt);
        let cm = core.times(&mtv);
        for k in 0..m {
            e[k] -= mt[k] - cm[(k, 0)];
        }
    }
    let (a, b, rows) = average_rows(&grouping.groups, &cz, &e);
    MomentSystem { a, b, group_labels: grouping.group_names.clone(), rows }.checked()
}

/// Variance systems with the group averages restricted to the in- and
/// out-parts of a random split; the unknowns stay one per original group.
pub fn build_split_systems(
    core: &MomentCore,
    z: &CoDataMatrix,
    grouping: &Grouping,
    split: &GroupSplit,
) -> Result<(MomentSystem, MomentSystem)> {
    check_grouping(core, grouping, z)?;
    if split.in_groups.len() != grouping.n_groups() || split.out_groups.len() != grouping.n_groups() {
        return Err(EcpcError::dim("split does not match the grouping"));
    }
    let m2z = core.squared_times(&z.entries);
    let e = variance_rhs(core, z, None)?;
    Ok(split_from_rows(&m2z, &e, grouping, split))
}

/// Split systems from precomputed `C.²Z` and right-hand side rows.
pub fn split_from_rows(
    m2z: &DMatrix<f64>,
    e: &DVector<f64>,
    grouping: &Grouping,
    split: &GroupSplit,
) -> (MomentSystem, MomentSystem) {
    let make = |sets: &[Vec<usize>], part: &str| {
        let (a, b, rows) = average_rows(sets, m2z, e);
        if rows.len() < sets.len() {
            warn!("{} group(s) of '{}' have an empty {part}-part; equation dropped", sets.len() - rows.len(), grouping.name);
        }
        MomentSystem { a, b, group_labels: grouping.group_names.clone(), rows }
    };
    (make(&split.in_groups, "in"), make(&split.out_groups, "out"))
}

/// Per-covariate rows `C.²Z` and right-hand side `β̃² − v` (zero prior mean),
/// shared by all split systems of one grouping.
pub fn variance_rows(core: &MomentCore, z: &CoDataMatrix) -> (DMatrix<f64>, DVector<f64>) {
    let m2z = core.squared_times(&z.entries);
    let e = DVector::from_fn(core.m(), |k, _| core.beta_tilde[k] * core.beta_tilde[k] - core.v[k]);
    (m2z, e)
}

/// Pooled system for the grouping weights: rows are all groups of all
/// groupings; column `d` is `τ²_global P C.² Z⁽ᵈ⁾ γ̂⁽ᵈ⁾`.
pub fn build_grouping_weight_system(
    core: &MomentCore,
    groupings: &[Grouping],
    zs: &[CoDataMatrix],
    gamma_hats: &[Vec<f64>],
    tau_global: f64,
) -> Result<MomentSystem> {
    let d = groupings.len();
    if d == 0 || zs.len() != d || gamma_hats.len() != d {
        return Err(EcpcError::dim("groupings, co-data matrices and group weights differ in number"));
    }
    let m = core.m();
    let mut t = DMatrix::zeros(m, d);
    for i in 0..d {
        check_grouping(core, &groupings[i], &zs[i])?;
        if gamma_hats[i].len() != groupings[i].n_groups() {
            return Err(EcpcError::dim(format!(
                "grouping '{}' has {} groups but {} weights",
                groupings[i].name,
                groupings[i].n_groups(),
                gamma_hats[i].len()
            )));
        }
        let col = zs[i].apply(&gamma_hats[i]);
        t.set_column(i, &DVector::from_vec(col));
    }
    let m2t = core.squared_times(&t) * tau_global;
    let e = DVector::from_fn(m, |k, _| core.beta_tilde[k] * core.beta_tilde[k] - core.v[k]);
    let sets: Vec<Vec<usize>> = groupings.iter().flat_map(|g| g.groups.iter().cloned()).collect();
    let labels: Vec<String> = groupings.iter().map(|g| g.name.clone()).collect();
    let (a, b, rows) = average_rows(&sets, &m2t, &e);
    MomentSystem { a, b, group_labels: labels, rows }.checked()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codata::build_codata_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng))
    }

    fn direct_c_v(x: &DMatrix<f64>, w: &[f64], omega: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let wm = DMatrix::from_diagonal(&DVector::from_column_slice(w));
        let xtwx = x.transpose() * wm * x;
        let inv = (&xtwx + DMatrix::from_diagonal(&DVector::from_column_slice(omega))).try_inverse().unwrap();
        let c = &inv * &xtwx;
        let v = (&inv * &xtwx * &inv).diagonal();
        (c, v)
    }

    #[test]
    fn orthonormal_columns_closed_form() {
        let q = randn(10, 4, 1).qr().q();
        let lambda = 2.5;
        let core = compute_moment_core(&q, &[1.0; 10], &[lambda; 4], &[0.0; 4], &CoreOptions::default()).unwrap();
        let c = core.c_full().unwrap();
        for k in 0..4 {
            for l in 0..4 {
                let e = if k == l { 1.0 / (1.0 + lambda) } else { 0.0 };
                assert!((c[(k, l)] - e).abs() < 1e-12);
            }
            assert!((core.v[k] - 1.0 / (1.0 + lambda).powi(2)).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_inversion_primal_and_dual() {
        for &(n, p) in &[(8usize, 5usize), (5, 8)] {
            let x = randn(n, p, 7 + n as u64);
            let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * i as f64).collect();
            let omega: Vec<f64> = (0..p).map(|k| 0.5 + 0.2 * k as f64).collect();
            let (c0, v0) = direct_c_v(&x, &w, &omega);
            for limit in [0, DEFAULT_DENSE_LIMIT] {
                let core = compute_moment_core(&x, &w, &omega, &vec![0.0; p], &CoreOptions { dense_limit: limit }).unwrap();
                assert!((core.c_penalised() - &c0).amax() < 1e-8);
                for k in 0..p {
                    assert!((core.v[k] - v0[k]).abs() < 1e-8);
                    assert!((core.c_row(k) - c0.row(k).transpose()).amax() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn unpenalised_column_is_unit_vector() {
        let mut x = randn(9, 4, 3);
        x = x.insert_column(4, 1.0);
        let omega = [1.0, 2.0, 1.5, 0.7, 0.0];
        let core = compute_moment_core(&x, &[1.0; 9], &omega, &[0.0; 5], &CoreOptions::default()).unwrap();
        let c = core.c_full().unwrap();
        // direct oracle on the full (singular-precision) system
        let xtx = x.transpose() * &x;
        let inv = (&xtx + DMatrix::from_diagonal(&DVector::from_column_slice(&omega))).try_inverse().unwrap();
        let c0 = &inv * &xtx;
        assert!((&c - &c0).amax() < 1e-8);
        for k in 0..4 {
            assert!(c[(k, 4)].abs() < 1e-10);
        }
    }

    #[test]
    fn single_group_scalar_system() {
        let x = randn(6, 5, 11);
        let beta: Vec<f64> = (0..5).map(|k| 0.1 * k as f64 - 0.2).collect();
        let core = compute_moment_core(&x, &[1.0; 6], &[1.3; 5], &beta, &CoreOptions::default()).unwrap();
        let g = Grouping::new("all", 5, vec![(0..5).collect()]).unwrap();
        let z = build_codata_matrix(&g).unwrap();
        let sys = build_variance_system(&core, &z, &g, None).unwrap();
        let c = core.c_penalised();
        let a: f64 = c.iter().map(|v| v * v).sum::<f64>() / 5.0;
        let b: f64 = (0..5).map(|k| beta[k] * beta[k] - core.v[k]).sum::<f64>() / 5.0;
        assert!((sys.a[(0, 0)] - a).abs() < 1e-12);
        assert!((sys.b[0] - b).abs() < 1e-12);
        assert!(sys.a[(0, 0)] > 0.0);
    }

    #[test]
    fn mean_system_uniform_case() {
        let q = randn(10, 4, 2).qr().q();
        let beta = [0.5, -0.2, 0.1, 0.4];
        let core = compute_moment_core(&q, &[1.0; 10], &[3.0; 4], &beta, &CoreOptions::default()).unwrap();
        let g = Grouping::new("all", 4, vec![(0..4).collect()]).unwrap();
        let z = build_codata_matrix(&g).unwrap();
        let sys = build_mean_system(&core, &z, &g, None).unwrap();
        assert!((sys.a[(0, 0)] - 0.25).abs() < 1e-12);
        assert!((sys.b[0] - 0.2).abs() < 1e-12);
        let zero = build_mean_system(&core, &z, &g, Some(&[0.0; 4])).unwrap();
        assert_eq!(zero.b, sys.b);
    }

    #[test]
    fn degenerate_split_equals_full_system() {
        let x = randn(7, 6, 5);
        let beta: Vec<f64> = (0..6).map(|k| (k as f64).sin()).collect();
        let core = compute_moment_core(&x, &[1.0; 7], &[0.8; 6], &beta, &CoreOptions::default()).unwrap();
        let g = Grouping::new("g", 6, vec![vec![0, 1, 2], vec![3, 4, 5]]).unwrap();
        let z = build_codata_matrix(&g).unwrap();
        let full = build_variance_system(&core, &z, &g, None).unwrap();
        let (sin, sout) = build_split_systems(&core, &z, &g, &GroupSplit::degenerate(&g)).unwrap();
        assert_eq!(sin.a, full.a);
        assert_eq!(sin.b, full.b);
        assert_eq!(sout.n_equations(), 0);
    }

    #[test]
    fn split_group_sum_identity() {
        let x = randn(8, 9, 6);
        let beta: Vec<f64> = (0..9).map(|k| (k as f64 * 0.7).cos()).collect();
        let core = compute_moment_core(&x, &[0.9; 8], &[1.1; 9], &beta, &CoreOptions::default()).unwrap();
        let g = Grouping::new("g", 9, vec![vec![0, 1, 2, 3, 4], vec![5, 6, 7, 8]]).unwrap();
        let z = build_codata_matrix(&g).unwrap();
        let full = build_variance_system(&core, &z, &g, None).unwrap();
        let split = crate::codata::split_groups_random(&g, 17);
        let (sin, sout) = build_split_systems(&core, &z, &g, &split).unwrap();
        for gi in 0..2 {
            let ni = split.in_groups[gi].len() as f64;
            let no = split.out_groups[gi].len() as f64;
            let ng = g.groups[gi].len() as f64;
            let lhs = sin.a.row(gi) * ni + sout.a.row(gi) * no;
            assert!((lhs - full.a.row(gi) * ng).amax() < 1e-12);
        }
    }

    #[test]
    fn grouping_weight_system_single_and_duplicate() {
        let x = randn(6, 8, 9);
        let beta: Vec<f64> = (0..8).map(|k| 0.05 * k as f64).collect();
        let core = compute_moment_core(&x, &[1.0; 6], &[2.0; 8], &beta, &CoreOptions::default()).unwrap();
        let g = Grouping::new("g", 8, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]]).unwrap();
        let z = build_codata_matrix(&g).unwrap();
        let gamma = vec![0.5, 2.0];
        let tau = 0.3;
        let one = build_grouping_weight_system(&core, &[g.clone()], &[z.clone()], &[gamma.clone()], tau).unwrap();
        let var = build_variance_system(&core, &z, &g, None).unwrap();
        let expected = &var.a * DVector::from_column_slice(&gamma) * tau;
        assert!((one.a.column(0) - expected).amax() < 1e-12);
        let two = build_grouping_weight_system(
            &core,
            &[g.clone(), g.clone()],
            &[z.clone(), z.clone()],
            &[gamma.clone(), gamma],
            tau,
        )
        .unwrap();
        assert_eq!(two.a.column(0), two.a.column(1));
    }
}
