//! The three-step estimation pipeline and prediction.
//!
//! 1. global prior variance with all local variances equal to one;
//! 2. group weights per grouping from the moment systems, with
//!    hypershrinkage tuned by random group splits (groupings in parallel);
//! 3. grouping weights from the pooled system;
//!
//! followed by the final weighted-ridge fit.

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codata::{build_codata_matrix, codata_matrix_partial, CoDataMatrix, Grouping};
use crate::error::{EcpcError, Result};
use crate::glm::{
    breslow_cumhaz, check_design, estimate_global_variance, fit_weighted_ridge, logistic, weight_matrix, Family,
    FitOptions, GlobalMethod, GlobalOptions, GlobalVariance, PenaltyState, Response, RidgeFit,
};
use crate::hypershrinkage::{
    estimate_hyperlambda, group_size_scaling, solve_hierarchical_lasso, solve_lasso_hyper, solve_ridge_hyper, HyperKind,
    HyperTuning,
};
use crate::linalg::{least_squares_min_norm, rank};
use crate::mom::{compute_moment_core, variance_rows, CoreOptions, MomentCore, MomentSystem};

pub const MODEL_VERSION: &str = "ecpc-model/1";

/// Lower bound applied to combined local variances outside group-sparse mode.
pub const TAU_LOCAL_FLOOR: f64 = 1e-6;

/// One co-data source and how its group weights are shrunk.
#[derive(Debug, Clone, PartialEq)]
pub struct CoDataSource {
    pub grouping: Grouping,
    pub hyper: HyperKind,
    /// Use this hyperpenalty instead of tuning it.
    pub fixed_lambda: Option<f64>,
}

impl CoDataSource {
    pub fn new(grouping: Grouping, hyper: HyperKind) -> Self {
        Self { grouping, hyper, fixed_lambda: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcpcOptions {
    pub global: GlobalOptions,
    pub tuning: HyperTuning,
    pub core: CoreOptions,
    /// Skip step 1 and use this global prior variance.
    pub tau_global: Option<f64>,
    pub fit: FitOptions,
}

impl Default for EcpcOptions {
    fn default() -> Self {
        Self {
            global: GlobalOptions::default(),
            tuning: HyperTuning::default(),
            core: CoreOptions::default(),
            tau_global: None,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingFit {
    pub grouping: Grouping,
    pub hyper: HyperKind,
    pub gamma: Vec<f64>,
    pub gamma_raw: Vec<f64>,
    pub selected: Vec<bool>,
    /// Hyperpenalty of the first (or only) solve.
    pub lambda: f64,
    /// Hyperpenalty of the ridge refit for the `*_then_ridge` kinds.
    pub lambda_refit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    /// Distinct sample times, ascending.
    pub times: Vec<f64>,
    /// Breslow cumulative baseline hazard at those times.
    pub cumhaz: Vec<f64>,
}

impl Baseline {
    pub fn cumhaz_at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => 0.0,
            i => self.cumhaz[i - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub deviance: f64,
    pub separation: bool,
    pub global_method: Option<GlobalMethod>,
    /// Grouping-weight system was rank deficient (least-norm solution used).
    pub w_rank_deficient: bool,
    /// Penalised covariates with zero local variance, fixed at zero.
    pub excluded: Vec<usize>,
    /// Penalised covariates whose local variance was raised to the floor.
    pub floored: usize,
    /// All group weights were zero and the fit fell back to ordinary ridge.
    #[serde(default)]
    pub ordinary_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub version: String,
    pub family: Family,
    pub beta: Vec<f64>,
    pub tau_global: f64,
    pub sigma2: Option<f64>,
    pub groupings: Vec<GroupingFit>,
    pub w: Vec<f64>,
    /// Per covariate; zero on unpenalised covariates.
    pub tau_local: Vec<f64>,
    pub unpenalized: Vec<bool>,
    #[serde(default)]
    pub covariate_names: Vec<String>,
    pub baseline: Option<Baseline>,
    pub selected: Option<Vec<usize>>,
    pub diagnostics: Diagnostics,
}

impl FittedModel {
    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn pen_idx(&self) -> Vec<usize> {
        (0..self.p()).filter(|&k| !self.unpenalized[k]).collect()
    }

    pub fn penalty(&self) -> Result<PenaltyState> {
        PenaltyState::new(self.tau_global, self.tau_local.clone(), self.unpenalized.clone())
    }

    /// Response with the model's noise variance attached (gaussian).
    pub fn response_for(&self, resp: &Response) -> Response {
        match self.sigma2 {
            Some(s) if resp.sigma2().is_none() => resp.with_sigma2(s),
            _ => resp.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| EcpcError::Numeric(format!("model serialisation: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| EcpcError::invalid(format!("model JSON: {e}")))?;
        if m.version != MODEL_VERSION {
            return Err(EcpcError::invalid(format!("unsupported model version '{}'", m.version)));
        }
        if m.tau_local.len() != m.beta.len() || m.unpenalized.len() != m.beta.len() {
            return Err(EcpcError::dim("model vectors disagree in length"));
        }
        Ok(m)
    }
}

/// `τ_local = Σ_d w_d Z⁽ᵈ⁾γ⁽ᵈ⁾` over the penalised covariates.
pub fn combine_local_variances(zs: &[CoDataMatrix], gammas: &[Vec<f64>], w: &[f64]) -> Result<Vec<f64>> {
    if zs.is_empty() || zs.len() != gammas.len() || zs.len() != w.len() {
        return Err(EcpcError::dim("co-data matrices, group weights and grouping weights differ in number"));
    }
    let m = zs[0].p();
    let mut tau = vec![0.0; m];
    for d in 0..zs.len() {
        if zs[d].p() != m || gammas[d].len() != zs[d].n_groups() {
            return Err(EcpcError::dim(format!("co-data source {} has inconsistent dimensions", d + 1)));
        }
        let zg = zs[d].apply(&gammas[d]);
        for k in 0..m {
            tau[k] += w[d] * zg[k];
        }
    }
    Ok(tau)
}

/// Truncated least squares for the grouping weights; the flag reports a
/// rank-deficient system (minimum-norm solution).
pub fn solve_grouping_weights(system: &MomentSystem) -> Result<(Vec<f64>, bool)> {
    let d = system.a.ncols();
    let deficient = rank(&system.a) < d;
    if deficient {
        warn!("grouping-weight system is rank deficient; groupings may be strongly correlated");
    }
    let w = least_squares_min_norm(&system.a, &system.b)?;
    Ok((w.iter().map(|&v| v.max(0.0)).collect(), deficient))
}

/// Step 1 and the ordinary ridge fit at the estimated global variance.
pub fn fit_ordinary_ridge(
    x: &DMatrix<f64>,
    resp: &Response,
    unpenalized: &[bool],
    global: &GlobalOptions,
    fit: &FitOptions,
) -> Result<(GlobalVariance, Response, RidgeFit)> {
    let gv = estimate_global_variance(x, resp, unpenalized, global)?;
    let resp1 = match gv.sigma2 {
        Some(s) if resp.family() == Family::Gaussian => resp.with_sigma2(s),
        _ => resp.clone(),
    };
    let pen = PenaltyState::ordinary(gv.tau_global, unpenalized.to_vec())?;
    let rf = fit_weighted_ridge(x, &resp1, &pen, fit)?;
    Ok((gv, resp1, rf))
}

fn weights_at(resp: &Response, lp: &[f64]) -> Result<Vec<f64>> {
    match resp {
        Response::Cox { time, status } => {
            let h0 = breslow_cumhaz(time, status, lp)?;
            weight_matrix(resp, lp, Some(&h0))
        }
        _ => weight_matrix(resp, lp, None),
    }
}

/// Fit the co-data learnt weighted ridge model.
pub fn fit_ecpc(
    x: &DMatrix<f64>,
    resp: &Response,
    sources: &[CoDataSource],
    unpenalized: &[bool],
    opts: &EcpcOptions,
) -> Result<FittedModel> {
    check_design(x, resp)?;
    let p = x.ncols();
    if unpenalized.len() != p {
        return Err(EcpcError::dim("unpenalised mask length differs from the column count"));
    }
    if sources.is_empty() {
        return Err(EcpcError::invalid("at least one co-data source is required"));
    }
    let pen_idx: Vec<usize> = (0..p).filter(|&k| !unpenalized[k]).collect();
    let m = pen_idx.len();
    for s in sources {
        if s.grouping.p != m {
            return Err(EcpcError::dim(format!(
                "grouping '{}' covers {} covariates but {} are penalised",
                s.grouping.name, s.grouping.p, m
            )));
        }
        if s.hyper.is_hierarchical() && s.grouping.tree.is_none() {
            return Err(EcpcError::invalid(format!("grouping '{}' has no hierarchy", s.grouping.name)));
        }
    }
    let zs: Vec<CoDataMatrix> = sources.iter().map(|s| build_codata_matrix(&s.grouping)).collect::<Result<_>>()?;

    // step 1
    let (tau_global, sigma2, method, resp1) = match opts.tau_global {
        Some(t) => {
            if resp.family() == Family::Gaussian && resp.sigma2().is_none() {
                return Err(EcpcError::invalid("a fixed global variance needs a known noise variance"));
            }
            (t, resp.sigma2(), None, resp.clone())
        }
        None => {
            let gv = estimate_global_variance(x, resp, unpenalized, &opts.global)?;
            let r1 = match gv.sigma2 {
                Some(s) if resp.family() == Family::Gaussian => resp.with_sigma2(s),
                _ => resp.clone(),
            };
            (gv.tau_global, gv.sigma2, Some(gv.method), r1)
        }
    };
    info!("global prior variance {tau_global:.6e}");
    let pen0 = PenaltyState::ordinary(tau_global, unpenalized.to_vec())?;
    let fit0 = match fit_weighted_ridge(x, &resp1, &pen0, &opts.fit) {
        Ok(f) => f,
        Err(EcpcError::NonConvergence { last_beta, .. }) => {
            warn!("initial ridge fit did not converge; continuing from its last iterate");
            let lp = (x * DVector::from_column_slice(&last_beta)).iter().copied().collect();
            RidgeFit {
                beta: last_beta,
                linear_predictor: lp,
                converged: false,
                iterations: opts.fit.max_iter,
                deviance: f64::NAN,
                separation: false,
            }
        }
        Err(e) => return Err(e),
    };
    let w0 = weights_at(&resp1, &fit0.linear_predictor)?;
    let core = compute_moment_core(x, &w0, &pen0.precision_diag(), &fit0.beta, &opts.core)?;

    // step 2
    let fits: Vec<GroupingFit> = sources
        .par_iter()
        .enumerate()
        .map(|(d, s)| {
            let tuning = HyperTuning { seed: opts.tuning.seed.wrapping_add(1000 * d as u64), ..opts.tuning.clone() };
            fit_group_weights(&core, &zs[d], s, tau_global, &tuning)
        })
        .collect::<Result<_>>()?;

    // step 3
    let gammas: Vec<Vec<f64>> = fits.iter().map(|f| f.gamma.clone()).collect();
    let (w, deficient) = if sources.len() == 1 {
        (vec![1.0], false)
    } else {
        let groupings: Vec<Grouping> = sources.iter().map(|s| s.grouping.clone()).collect();
        let sys = crate::mom::build_grouping_weight_system(&core, &groupings, &zs, &gammas, tau_global)?;
        solve_grouping_weights(&sys)?
    };
    let tau_pen = combine_local_variances(&zs, &gammas, &w)?;
    let sparse = sources.iter().any(|s| s.hyper.is_sparse());
    let mut tau_local = vec![0.0; p];
    let mut excluded = Vec::new();
    let mut floored = 0;
    for (j, &k) in pen_idx.iter().enumerate() {
        let t = tau_pen[j];
        if sparse && t == 0.0 {
            excluded.push(k);
        } else if t < TAU_LOCAL_FLOOR {
            floored += 1;
            tau_local[k] = TAU_LOCAL_FLOOR;
        } else {
            tau_local[k] = t;
        }
    }
    if m > 0 && excluded.len() == m {
        return Err(EcpcError::Numeric("every local prior variance is zero".into()));
    }
    let uninformative = m > 0 && !sparse && tau_pen.iter().all(|&t| t == 0.0);
    if uninformative {
        warn!("every group weight is zero; falling back to ordinary ridge");
        for &k in &pen_idx {
            tau_local[k] = 1.0;
        }
        floored = 0;
    }
    if floored > 0 {
        warn!("{floored} local variance(s) raised to {TAU_LOCAL_FLOOR}");
    }
    let pen = PenaltyState::new(tau_global, tau_local.clone(), unpenalized.to_vec())?;
    let fo = FitOptions { init: Some(fit0.beta.clone()), ..opts.fit.clone() };
    let fit = fit_weighted_ridge(x, &resp1, &pen, &fo)?;
    let baseline = match &resp1 {
        Response::Cox { time, status } => Some(make_baseline(time, status, &fit.linear_predictor)?),
        _ => None,
    };
    Ok(FittedModel {
        version: MODEL_VERSION.to_string(),
        family: resp.family(),
        beta: fit.beta,
        tau_global,
        sigma2,
        groupings: fits,
        w,
        tau_local,
        unpenalized: unpenalized.to_vec(),
        covariate_names: Vec::new(),
        baseline,
        selected: None,
        diagnostics: Diagnostics {
            converged: fit.converged,
            iterations: fit.iterations,
            deviance: fit.deviance,
            separation: fit.separation,
            global_method: method,
            w_rank_deficient: deficient,
            excluded,
            floored,
            ordinary_fallback: uninformative,
        },
    })
}

pub fn make_baseline(time: &[f64], status: &[f64], lp: &[f64]) -> Result<Baseline> {
    let h0 = breslow_cumhaz(time, status, lp)?;
    let mut pairs: Vec<(f64, f64)> = time.iter().copied().zip(h0).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.dedup_by(|a, b| a.0 == b.0);
    Ok(Baseline { times: pairs.iter().map(|p| p.0).collect(), cumhaz: pairs.iter().map(|p| p.1).collect() })
}

/// Step 2 for one grouping.
pub fn fit_group_weights(
    core: &MomentCore,
    z: &CoDataMatrix,
    source: &CoDataSource,
    tau_global: f64,
    tuning: &HyperTuning,
) -> Result<GroupingFit> {
    let grouping = &source.grouping;
    let (mut rows, rhs) = variance_rows(core, z);
    rows *= tau_global;
    let w_gamma = group_size_scaling(grouping);
    let (full, _) = crate::mom::split_from_rows(&rows, &rhs, grouping, &crate::codata::GroupSplit::degenerate(grouping));
    let kind = source.hyper;
    let lambda = match (kind, source.fixed_lambda) {
        (HyperKind::None, _) => 0.0,
        (_, Some(l)) => l,
        _ => estimate_hyperlambda(&rows, &rhs, grouping, kind, tuning)?.lambda,
    };
    let first = match kind {
        HyperKind::None | HyperKind::Ridge => solve_ridge_hyper(&full, lambda, &w_gamma)?,
        HyperKind::Lasso | HyperKind::LassoThenRidge => solve_lasso_hyper(&full, lambda, &w_gamma, None)?,
        HyperKind::HierarchicalLasso | HyperKind::HierLassoThenRidge => {
            let tree = grouping.tree.as_ref().expect("checked by caller");
            solve_hierarchical_lasso(&full, tree, lambda, None)?
        }
    };
    if !kind.refits_with_ridge() {
        return Ok(GroupingFit {
            grouping: grouping.clone(),
            hyper: kind,
            gamma: first.gamma,
            gamma_raw: first.raw,
            selected: first.selected,
            lambda,
            lambda_refit: None,
        });
    }
    let keep: Vec<usize> = (0..grouping.n_groups()).filter(|&g| first.selected[g]).collect();
    let mut raw = vec![0.0; grouping.n_groups()];
    let mut lambda_refit = None;
    if !keep.is_empty() {
        let reduced = grouping.restrict(&keep)?;
        let z_red = codata_matrix_partial(&reduced);
        let rows_red = core.squared_times(&z_red.entries) * tau_global;
        let lr = estimate_hyperlambda(&rows_red, &rhs, &reduced, HyperKind::Ridge, tuning)?.lambda;
        let (sys_red, _) =
            crate::mom::split_from_rows(&rows_red, &rhs, &reduced, &crate::codata::GroupSplit::degenerate(&reduced));
        let refit = solve_ridge_hyper(&sys_red, lr, &group_size_scaling(&reduced))?;
        for (i, &g) in keep.iter().enumerate() {
            raw[g] = refit.raw[i];
        }
        lambda_refit = Some(lr);
    }
    Ok(GroupingFit {
        grouping: grouping.clone(),
        hyper: kind,
        gamma: raw.iter().map(|&g| g.max(0.0)).collect(),
        gamma_raw: raw,
        selected: first.selected,
        lambda,
        lambda_refit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub linear_predictor: Vec<f64>,
    /// Mean for gaussian, probability for binomial, relative risk `exp(lp)` for cox.
    pub response: Vec<f64>,
}

pub fn predict(model: &FittedModel, x_new: &DMatrix<f64>) -> Result<Prediction> {
    if x_new.ncols() != model.p() {
        return Err(EcpcError::dim(format!(
            "new data has {} columns but the model has {}",
            x_new.ncols(),
            model.p()
        )));
    }
    let lp: Vec<f64> = (x_new * DVector::from_column_slice(&model.beta)).iter().copied().collect();
    let response = match model.family {
        Family::Gaussian => lp.clone(),
        Family::Binomial => lp.iter().map(|&e| logistic(e)).collect(),
        Family::Cox => lp.iter().map(|&e| e.exp()).collect(),
    };
    Ok(Prediction { linear_predictor: lp, response })
}

/// Survival probabilities `exp(−H₀(t) e^{lp})` from the stored baseline.
pub fn predict_survival(model: &FittedModel, lp: &[f64], t: f64) -> Result<Vec<f64>> {
    let base = model.baseline.as_ref().ok_or_else(|| EcpcError::invalid("model has no baseline hazard"))?;
    let h = base.cumhaz_at(t);
    Ok(lp.iter().map(|&e| (-h * e.exp()).exp()).collect())
}
