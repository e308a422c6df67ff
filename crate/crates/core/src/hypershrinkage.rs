//! Penalised solutions of the group-level moment systems and tuning of the
//! hyperpenalty by random group splits.

use log::debug;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codata::{split_groups_random, GroupSplit, Grouping, HierTree};
use crate::error::{EcpcError, Result};
use crate::linalg::{least_squares_min_norm, logspace, solve_spd};
use crate::mom::{split_from_rows, MomentSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperKind {
    None,
    Ridge,
    Lasso,
    HierarchicalLasso,
    HierLassoThenRidge,
    LassoThenRidge,
}

impl HyperKind {
    pub fn is_sparse(self) -> bool {
        !matches!(self, HyperKind::None | HyperKind::Ridge)
    }

    pub fn is_hierarchical(self) -> bool {
        matches!(self, HyperKind::HierarchicalLasso | HyperKind::HierLassoThenRidge)
    }

    pub fn refits_with_ridge(self) -> bool {
        matches!(self, HyperKind::HierLassoThenRidge | HyperKind::LassoThenRidge)
    }
}

impl std::fmt::Display for HyperKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            HyperKind::None => "none",
            HyperKind::Ridge => "ridge",
            HyperKind::Lasso => "lasso",
            HyperKind::HierarchicalLasso => "hierarchical_lasso",
            HyperKind::HierLassoThenRidge => "hier_lasso_then_ridge",
            HyperKind::LassoThenRidge => "lasso_then_ridge",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for HyperKind {
    type Err = EcpcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "none" => Ok(HyperKind::None),
            "ridge" => Ok(HyperKind::Ridge),
            "lasso" => Ok(HyperKind::Lasso),
            "hierarchical_lasso" | "hierlasso" | "hier_lasso" => Ok(HyperKind::HierarchicalLasso),
            "hier_lasso_then_ridge" | "hierlasso_ridge" => Ok(HyperKind::HierLassoThenRidge),
            "lasso_then_ridge" | "lasso_ridge" => Ok(HyperKind::LassoThenRidge),
            other => Err(EcpcError::invalid(format!("unknown hypershrinkage kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperPenalty {
    pub kind: HyperKind,
    pub lambda: f64,
    pub size_scaling: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    /// Truncated group weights.
    pub gamma: Vec<f64>,
    /// Solution before truncation at zero.
    pub raw: Vec<f64>,
    pub selected: Vec<bool>,
    pub lambda_used: f64,
}

impl GroupWeights {
    fn from_raw(raw: Vec<f64>, selected: Vec<bool>, lambda: f64) -> Self {
        let gamma = raw.iter().map(|&g| g.max(0.0)).collect();
        Self { gamma, raw, selected, lambda_used: lambda }
    }
}

/// Diagonal of `W_γ`: the group sizes.
pub fn group_size_scaling(grouping: &Grouping) -> Vec<f64> {
    grouping.group_sizes().iter().map(|&s| s as f64).collect()
}

fn check_scaling(system: &MomentSystem, w_gamma: &[f64]) -> Result<()> {
    if w_gamma.len() != system.a.ncols() {
        return Err(EcpcError::dim("size scaling length differs from the number of unknowns"));
    }
    if w_gamma.iter().any(|&v| !(v > 0.0)) {
        return Err(EcpcError::invalid("size scaling entries must be positive"));
    }
    Ok(())
}

fn scaled_design(system: &MomentSystem, w_gamma: &[f64]) -> DMatrix<f64> {
    let mut b = system.a.clone();
    for (j, &w) in w_gamma.iter().enumerate() {
        b.column_mut(j).scale_mut(1.0 / w.sqrt());
    }
    b
}

/// `γ = W^{-1/2} argmin ‖A W^{-1/2} γ′ − b‖² + λ‖γ′ − W^{1/2}1‖²`, truncated at zero.
pub fn solve_ridge_hyper(system: &MomentSystem, lambda: f64, w_gamma: &[f64]) -> Result<GroupWeights> {
    if !(lambda >= 0.0) {
        return Err(EcpcError::invalid("hyperpenalty must be non-negative"));
    }
    check_scaling(system, w_gamma)?;
    let g = w_gamma.len();
    let b_mat = scaled_design(system, w_gamma);
    let target = DVector::from_iterator(g, w_gamma.iter().map(|w| w.sqrt()));
    let gp = if lambda == 0.0 {
        least_squares_min_norm(&b_mat, &system.b)?
    } else {
        let mut normal = b_mat.transpose() * &b_mat;
        for j in 0..g {
            normal[(j, j)] += lambda;
        }
        let rhs = b_mat.transpose() * &system.b + &target * lambda;
        solve_spd(&normal, &rhs)?
    };
    let raw: Vec<f64> = (0..g).map(|j| gp[j] / w_gamma[j].sqrt()).collect();
    Ok(GroupWeights::from_raw(raw, vec![true; g], lambda))
}

/// `‖2 (A W^{-1/2})ᵀ b‖_∞`: the smallest λ with an all-zero lasso solution.
pub fn lasso_lambda_max(system: &MomentSystem, w_gamma: &[f64]) -> f64 {
    let b_mat = scaled_design(system, w_gamma);
    (b_mat.transpose() * &system.b * 2.0).amax()
}

fn soft(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Coordinate descent for `‖B x − y‖² + λ‖x‖₁`.
pub(crate) fn lasso_cd(b_mat: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, max_sweeps: usize) -> Result<DVector<f64>> {
    let g = b_mat.ncols();
    let norms: Vec<f64> = (0..g).map(|j| b_mat.column(j).norm_squared()).collect();
    let mut x: DVector<f64> = DVector::zeros(g);
    let mut r = y.clone();
    let scale = y.norm().max(f64::MIN_POSITIVE);
    for sweep in 0..max_sweeps {
        let mut max_move: f64 = 0.0;
        for j in 0..g {
            if norms[j] == 0.0 {
                continue;
            }
            let col = b_mat.column(j);
            let rho = 2.0 * (col.dot(&r) + norms[j] * x[j]);
            let new = soft(rho, lambda) / (2.0 * norms[j]);
            let delta: f64 = new - x[j];
            if delta != 0.0 {
                r.axpy(-delta, &col, 1.0);
                x[j] = new;
                max_move = max_move.max(delta.abs() * norms[j].sqrt());
            }
        }
        if max_move <= 1e-15 * scale {
            debug!("lasso converged after {} sweeps", sweep + 1);
            return Ok(x);
        }
    }
    Err(EcpcError::Numeric(format!("group lasso did not converge in {max_sweeps} sweeps")))
}

/// Lasso on the size-scaled system (`‖A W^{-1/2}γ′ − b‖² + λ‖γ′‖₁`). With
/// `refit_lambda`, the selected groups are refit by ridge hypershrinkage on
/// the reduced system and the others set to zero.
pub fn solve_lasso_hyper(
    system: &MomentSystem,
    lambda: f64,
    w_gamma: &[f64],
    refit_lambda: Option<f64>,
) -> Result<GroupWeights> {
    if !(lambda >= 0.0) {
        return Err(EcpcError::invalid("hyperpenalty must be non-negative"));
    }
    check_scaling(system, w_gamma)?;
    let g = w_gamma.len();
    if lambda == 0.0 {
        let mut out = solve_ridge_hyper(system, 0.0, w_gamma)?;
        if let Some(lr) = refit_lambda {
            out = solve_ridge_hyper(system, lr, w_gamma)?;
        }
        return Ok(out);
    }
    let b_mat = scaled_design(system, w_gamma);
    let gp = if lambda >= lasso_lambda_max(system, w_gamma) {
        DVector::zeros(g)
    } else {
        lasso_cd(&b_mat, &system.b, lambda, 1_000_000)?
    };
    let selected: Vec<bool> = gp.iter().map(|&v| v != 0.0).collect();
    let raw: Vec<f64> = (0..g).map(|j| gp[j] / w_gamma[j].sqrt()).collect();
    match refit_lambda {
        None => Ok(GroupWeights::from_raw(raw, selected, lambda)),
        Some(lr) => refit_selected_groups(system, w_gamma, &selected, lr, lambda),
    }
}

fn refit_selected_groups(
    system: &MomentSystem,
    w_gamma: &[f64],
    selected: &[bool],
    ridge_lambda: f64,
    lambda: f64,
) -> Result<GroupWeights> {
    let keep: Vec<usize> = (0..selected.len()).filter(|&j| selected[j]).collect();
    let mut raw = vec![0.0; selected.len()];
    if !keep.is_empty() {
        let reduced = system.restrict_columns(&keep);
        let wk: Vec<f64> = keep.iter().map(|&j| w_gamma[j]).collect();
        let fit = solve_ridge_hyper(&reduced, ridge_lambda, &wk)?;
        for (i, &j) in keep.iter().enumerate() {
            raw[j] = fit.raw[i];
        }
    }
    Ok(GroupWeights::from_raw(raw, selected.to_vec(), lambda))
}

/// Root-to-node paths (as group indices) for every group: tree nodes use
/// their ancestry, groups outside the tree form singleton paths. The root's
/// own latent block is left unpenalised.
pub(crate) fn latent_paths(tree: &HierTree, n_groups: usize) -> Result<(Vec<Vec<usize>>, Vec<bool>)> {
    let mut paths = Vec::with_capacity(n_groups);
    let mut penalised = Vec::with_capacity(n_groups);
    for g in 0..n_groups {
        match tree.node_of_group(g) {
            Some(v) => {
                paths.push(tree.path_to(v).iter().map(|&u| tree.node_group[u]).collect());
                penalised.push(v != tree.root());
            }
            None => {
                paths.push(vec![g]);
                penalised.push(true);
            }
        }
    }
    if tree.node_group.iter().any(|&g| g >= n_groups) {
        return Err(EcpcError::dim("hierarchy refers to groups outside the system"));
    }
    Ok((paths, penalised))
}

/// Latent solution of the hierarchical lasso together with its objective
/// `‖Aγ − b‖² + λ Σ_v ‖ξ_v‖₂` (root block unpenalised).
pub fn hierarchical_lasso_latent(system: &MomentSystem, tree: &HierTree, lambda: f64) -> Result<(Vec<Vec<f64>>, f64)> {
    let g = system.a.ncols();
    let (paths, penalised) = latent_paths(tree, g)?;
    let latent = hier_lasso_latent(&system.a, &system.b, &paths, &penalised, lambda, None)?;
    let obj = latent_objective(&system.a, &system.b, &paths, &penalised, &latent, lambda);
    Ok((latent, obj))
}

pub(crate) fn latent_objective(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    paths: &[Vec<usize>],
    penalised: &[bool],
    xi: &[Vec<f64>],
    lambda: f64,
) -> f64 {
    let mut gamma = DVector::zeros(a.ncols());
    for (v, path) in paths.iter().enumerate() {
        for (i, &grp) in path.iter().enumerate() {
            gamma[grp] += xi[v][i];
        }
    }
    let pen: f64 = (0..paths.len())
        .filter(|&v| penalised[v])
        .map(|v| xi[v].iter().map(|x| x * x).sum::<f64>().sqrt())
        .sum();
    (a * gamma - b).norm_squared() + lambda * pen
}

/// Hierarchical lasso over the tree's root-to-node paths, solved by
/// accelerated proximal gradient on the latent formulation. Selection is the
/// union of the paths with a non-zero latent block, hence ancestor-closed.
pub fn solve_hierarchical_lasso(
    system: &MomentSystem,
    tree: &HierTree,
    lambda: f64,
    refit: Option<(f64, &[f64])>,
) -> Result<GroupWeights> {
    if !(lambda >= 0.0) {
        return Err(EcpcError::invalid("hyperpenalty must be non-negative"));
    }
    let g = system.a.ncols();
    let (paths, penalised) = latent_paths(tree, g)?;
    let latent = hier_lasso_latent(&system.a, &system.b, &paths, &penalised, lambda, None)?;
    let mut raw = vec![0.0; g];
    let mut selected = vec![false; g];
    for (v, xi) in latent.iter().enumerate() {
        let active = xi.iter().any(|&x| x != 0.0);
        for (i, &grp) in paths[v].iter().enumerate() {
            raw[grp] += xi[i];
            if active {
                selected[grp] = true;
            }
        }
    }
    match refit {
        None => Ok(GroupWeights::from_raw(raw, selected, lambda)),
        Some((lr, w_gamma)) => {
            check_scaling(system, w_gamma)?;
            refit_selected_groups(system, w_gamma, &selected, lr, lambda)
        }
    }
}

/// FISTA with adaptive restart for the latent problem. `active` restricts
/// which latent blocks may be non-zero.
pub(crate) fn hier_lasso_latent(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    paths: &[Vec<usize>],
    penalised: &[bool],
    lambda: f64,
    active: Option<&[bool]>,
) -> Result<Vec<Vec<f64>>> {
    let g = a.ncols();
    let nv = paths.len();
    let is_active = |v: usize| active.map_or(true, |s| s[v]);
    let mut cover = vec![0usize; g];
    for v in 0..nv {
        if is_active(v) {
            for &grp in &paths[v] {
                cover[grp] += 1;
            }
        }
    }
    let max_cover = cover.iter().copied().max().unwrap_or(1).max(1) as f64;
    let sigma = a.clone().singular_values().iter().cloned().fold(0.0_f64, f64::max);
    let lip = 2.0 * sigma * sigma * max_cover;
    let zero: Vec<Vec<f64>> = paths.iter().map(|p| vec![0.0; p.len()]).collect();
    if lip == 0.0 {
        return Ok(zero);
    }
    let step = 1.0 / lip;
    let assemble = |xi: &[Vec<f64>]| {
        let mut gamma = DVector::zeros(g);
        for v in 0..nv {
            for (i, &grp) in paths[v].iter().enumerate() {
                gamma[grp] += xi[v][i];
            }
        }
        gamma
    };
    let objective = |xi: &[Vec<f64>]| {
        let r = a * assemble(xi) - b;
        let pen: f64 = (0..nv)
            .filter(|&v| penalised[v])
            .map(|v| xi[v].iter().map(|x| x * x).sum::<f64>().sqrt())
            .sum();
        r.norm_squared() + lambda * pen
    };
    let mut x = zero.clone();
    let mut y = zero.clone();
    let mut t = 1.0_f64;
    let mut f_old = objective(&x);
    let scale = b.norm_squared().max(f64::MIN_POSITIVE);
    let mut f_window = f_old;
    let mut restarted = false;
    let max_iter = 200_000;
    for it in 0..max_iter {
        let grad_gamma = a.transpose() * (a * assemble(&y) - b) * 2.0;
        let mut x_new = zero.clone();
        for v in 0..nv {
            if !is_active(v) {
                continue;
            }
            let mut blk: Vec<f64> = paths[v].iter().enumerate().map(|(i, &grp)| y[v][i] - step * grad_gamma[grp]).collect();
            if penalised[v] {
                let nrm = blk.iter().map(|z| z * z).sum::<f64>().sqrt();
                let thr = step * lambda;
                if nrm <= thr {
                    blk.iter_mut().for_each(|z| *z = 0.0);
                } else {
                    let s = 1.0 - thr / nrm;
                    blk.iter_mut().for_each(|z| *z *= s);
                }
            }
            x_new[v] = blk;
        }
        let f_new = objective(&x_new);
        if f_new > f_old {
            if restarted {
                // a plain proximal step no longer descends
                debug!("hierarchical lasso converged after {it} iterations");
                return Ok(x);
            }
            t = 1.0;
            y = x.clone();
            restarted = true;
            continue;
        }
        restarted = false;
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let mom = (t - 1.0) / t_new;
        let mut change: f64 = 0.0;
        let mut size: f64 = 0.0;
        for v in 0..nv {
            for i in 0..paths[v].len() {
                let d = x_new[v][i] - x[v][i];
                change = change.max(d.abs());
                size = size.max(x_new[v][i].abs());
                y[v][i] = x_new[v][i] + mom * d;
            }
        }
        x = x_new;
        t = t_new;
        f_old = f_new;
        if it % 50 == 0 {
            // stagnation of the objective over a window of iterations
            let denom = f_new.abs().max(1e-12 * scale);
            if it > 0 && (f_window - f_new) / denom < 1e-13 {
                debug!("hierarchical lasso converged after {it} iterations");
                return Ok(x);
            }
            f_window = f_new;
        }
    }
    debug!("hierarchical lasso stopped at the iteration limit");
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperTuning {
    pub n_splits: usize,
    pub seed: u64,
    /// Relative grid, multiplied by a system-dependent scale.
    pub grid: Vec<f64>,
    pub extend_boundary: bool,
    /// Use the full groups as in-part and the full system as out-part.
    pub degenerate: bool,
}

impl Default for HyperTuning {
    fn default() -> Self {
        Self { n_splits: 10, seed: 1, grid: logspace(1e-3, 1e7, 25), extend_boundary: true, degenerate: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperLambda {
    pub lambda: f64,
    /// Multiplier turning relative grid values into absolute ones.
    pub scale: f64,
    pub grid: Vec<f64>,
    pub rss: Vec<f64>,
}

/// Scale making the relative λ grid comparable across systems: the mean
/// squared column norm of `A W^{-1/2}` for ridge kinds, `λ_max / 1e7` for
/// sparse kinds (so the top of the default grid is the null threshold).
pub fn hyperlambda_scale(system: &MomentSystem, w_gamma: &[f64], kind: HyperKind, top: f64) -> f64 {
    let b_mat = scaled_design(system, w_gamma);
    let s = if kind.is_sparse() {
        let mut lm = lasso_lambda_max(system, w_gamma);
        if kind.is_hierarchical() {
            lm = (system.a.transpose() * &system.b * 2.0).norm();
        }
        lm / top
    } else {
        b_mat.norm_squared() / w_gamma.len().max(1) as f64
    };
    if s > 0.0 && s.is_finite() {
        s
    } else {
        1.0
    }
}

/// Solve one (in-part) system for a tuning candidate; sparse kinds are tuned
/// without their ridge refit.
fn solve_for_tuning(
    system: &MomentSystem,
    kind: HyperKind,
    lambda: f64,
    w_gamma: &[f64],
    tree: Option<&HierTree>,
) -> Result<Vec<f64>> {
    let fit = match kind {
        HyperKind::None => solve_ridge_hyper(system, 0.0, w_gamma)?,
        HyperKind::Ridge => solve_ridge_hyper(system, lambda, w_gamma)?,
        HyperKind::Lasso | HyperKind::LassoThenRidge => solve_lasso_hyper(system, lambda, w_gamma, None)?,
        HyperKind::HierarchicalLasso | HyperKind::HierLassoThenRidge => {
            let tree = tree.ok_or_else(|| EcpcError::invalid("hierarchical hypershrinkage needs a tree"))?;
            solve_hierarchical_lasso(system, tree, lambda, None)?
        }
    };
    Ok(fit.raw)
}

/// Pick λ minimising the mean out-part RSS `‖A_out γ̃_in(λ) − b_out‖²` over
/// random group splits. `rows`/`rhs` are the per-covariate rows of the
/// variance system (already multiplied by the global variance).
pub fn estimate_hyperlambda(
    rows: &DMatrix<f64>,
    rhs: &DVector<f64>,
    grouping: &Grouping,
    kind: HyperKind,
    tuning: &HyperTuning,
) -> Result<HyperLambda> {
    if tuning.grid.is_empty() {
        return Err(EcpcError::invalid("empty hyperpenalty grid"));
    }
    if tuning.n_splits == 0 && !tuning.degenerate {
        return Err(EcpcError::invalid("at least one group split is needed"));
    }
    let w_gamma = group_size_scaling(grouping);
    let tree = grouping.tree.as_ref();
    let full_split = GroupSplit::degenerate(grouping);
    let (full, _) = split_from_rows(rows, rhs, grouping, &full_split);
    let top = tuning.grid.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
    let scale = hyperlambda_scale(&full, &w_gamma, kind, top);
    let pairs: Vec<(MomentSystem, MomentSystem)> = if tuning.degenerate {
        vec![(full.clone(), full.clone())]
    } else {
        (0..tuning.n_splits)
            .map(|s| split_from_rows(rows, rhs, grouping, &split_groups_random(grouping, tuning.seed.wrapping_add(s as u64))))
            .collect()
    };
    let score = |rel: f64| -> f64 {
        let lam = rel * scale;
        let mut total = 0.0;
        for (sin, sout) in &pairs {
            let gamma = match solve_for_tuning(sin, kind, lam, &w_gamma, tree) {
                Ok(g) => DVector::from_vec(g),
                Err(_) => return f64::NAN,
            };
            total += (&sout.a * gamma - &sout.b).norm_squared();
        }
        total / pairs.len() as f64
    };
    let mut grid = tuning.grid.clone();
    grid.sort_by(|a, b| a.total_cmp(b));
    let mut rss: Vec<f64> = grid.par_iter().map(|&r| score(r)).collect();
    let pick = |rss: &[f64]| {
        (0..rss.len())
            .filter(|&i| rss[i].is_finite())
            .min_by(|&i, &j| rss[i].total_cmp(&rss[j]).then(j.cmp(&i)))
    };
    let mut best = pick(&rss).ok_or_else(|| EcpcError::Numeric("every hyperpenalty candidate gave a non-finite RSS".into()))?;
    if tuning.extend_boundary && grid.len() > 1 && (best == 0 || best == grid.len() - 1) {
        let ratio = (grid[1] / grid[0]).max(1.0 + 1e-9);
        let per_decade = (10f64.ln() / ratio.ln()).round().max(1.0) as usize;
        let extra: Vec<f64> = if best == 0 {
            (1..=per_decade).rev().map(|i| grid[0] / ratio.powi(i as i32)).collect()
        } else {
            (1..=per_decade).map(|i| grid[grid.len() - 1] * ratio.powi(i as i32)).collect()
        };
        let extra_rss: Vec<f64> = extra.par_iter().map(|&r| score(r)).collect();
        if best == 0 {
            grid = extra.into_iter().chain(grid).collect();
            rss = extra_rss.into_iter().chain(rss).collect();
        } else {
            grid.extend(extra);
            rss.extend(extra_rss);
        }
        best = pick(&rss).expect("non-empty");
    }
    let abs_grid: Vec<f64> = grid.iter().map(|r| r * scale).collect();
    Ok(HyperLambda { lambda: abs_grid[best], scale, grid: abs_grid, rss })
}
