//! Posterior covariate selection on a fitted dense model and refitting of
//! the selected submodel.
//!
//! Unpenalised covariates are always kept and never counted towards a
//! target count. Selected index sets refer to the original covariate order.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EcpcError, Result};
use crate::estimator::FittedModel;
use crate::glm::{
    breslow_cumhaz, estimate_global_variance, fit_weighted_ridge, loglik, weight_matrix, FitOptions, GlobalOptions,
    PenaltyState, Response,
};
use crate::linalg::{logspace, scaled_gram_factor, select_columns, PenalisedDesign};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefitMode {
    #[default]
    Dense,
    Recalibrated,
}

impl std::str::FromStr for RefitMode {
    type Err = EcpcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dense" => Ok(RefitMode::Dense),
            "recalibrated" | "recalibrate" => Ok(RefitMode::Recalibrated),
            other => Err(EcpcError::invalid(format!("unknown refit mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    L1,
    Dss,
    Credible,
}

impl std::str::FromStr for SelectionMethod {
    type Err = EcpcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" | "elnet" | "lasso" => Ok(SelectionMethod::L1),
            "dss" => Ok(SelectionMethod::Dss),
            "credible" | "mcr" => Ok(SelectionMethod::Credible),
            other => Err(EcpcError::invalid(format!("unknown selection method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Selected penalised covariates, ascending.
    pub selected: Vec<usize>,
    pub method: SelectionMethod,
    /// λ₁ for L1, λ for DSS, the implied threshold `t_n` for credible.
    pub tuning: f64,
    /// Refitted coefficients: zero off the selected and unpenalised covariates.
    pub beta: Vec<f64>,
    pub refit: RefitMode,
    /// Whether the requested count was hit without tie-breaking.
    pub exact: bool,
}

fn check_model(model: &FittedModel, x: &DMatrix<f64>) -> Result<()> {
    if x.ncols() != model.p() {
        return Err(EcpcError::dim(format!("X has {} columns but the model has {}", x.ncols(), model.p())));
    }
    Ok(())
}

fn selectable(model: &FittedModel) -> Vec<usize> {
    (0..model.p()).filter(|&k| !model.unpenalized[k] && model.tau_local[k] > 0.0).collect()
}

/// Coordinate descent for
/// `½ Σ w_i (z_i − X_i β)² + ½ Σ α_k β_k² + Σ λ_k |β_k|`.
struct WeightedCd<'a> {
    x: &'a DMatrix<f64>,
    alpha: Vec<f64>,
    l1: Vec<f64>,
}

impl WeightedCd<'_> {
    fn solve(&self, w: &[f64], z: &[f64], beta: &mut DVector<f64>, scale: &[f64]) {
        let (n, p) = self.x.shape();
        let mut r: Vec<f64> = (0..n).map(|i| z[i] - (self.x.row(i) * &*beta)[0]).collect();
        let xwx: Vec<f64> = (0..p).map(|k| (0..n).map(|i| w[i] * self.x[(i, k)] * self.x[(i, k)]).sum()).collect();
        for _ in 0..100_000 {
            let mut max_move: f64 = 0.0;
            for k in 0..p {
                let denom = xwx[k] + self.alpha[k];
                if denom == 0.0 {
                    continue;
                }
                let col = self.x.column(k);
                let grad: f64 = (0..n).map(|i| w[i] * col[i] * r[i]).sum::<f64>() + xwx[k] * beta[k];
                let new = soft(grad, self.l1[k]) / denom;
                let delta = new - beta[k];
                if delta != 0.0 {
                    for i in 0..n {
                        r[i] -= delta * col[i];
                    }
                    beta[k] = new;
                    max_move = max_move.max(delta.abs() * scale[k]);
                }
            }
            if max_move < 1e-12 {
                return;
            }
        }
        warn!("coordinate descent stopped at the sweep limit");
    }
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

fn working(resp: &Response, lp: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let w = match resp {
        Response::Cox { time, status } => {
            let h0 = breslow_cumhaz(time, status, lp)?;
            weight_matrix(resp, lp, Some(&h0))?
        }
        _ => weight_matrix(resp, lp, None)?,
    };
    let resid: Vec<f64> = match resp {
        Response::Gaussian { y, sigma2 } => {
            let s2 = sigma2.unwrap_or(1.0);
            y.iter().zip(lp).map(|(a, b)| (a - b) / s2).collect()
        }
        Response::Binomial { y } => y.iter().zip(lp).map(|(&a, &e)| a - crate::glm::logistic(e)).collect(),
        Response::Cox { status, .. } => status.iter().zip(&w).map(|(d, wi)| d - wi).collect(),
    };
    let w: Vec<f64> = w.iter().map(|&v| v.max(1e-10)).collect();
    Ok((w, resid))
}

/// Elastic net on the rescaled design at one λ₁, by IRLS with an inner
/// coordinate descent. `beta` holds the warm start and the result.
fn elastic_net(
    xs: &DMatrix<f64>,
    resp: &Response,
    alpha: &[f64],
    l1: &[f64],
    beta: &mut DVector<f64>,
) -> Result<()> {
    let objective = |b: &DVector<f64>| {
        let lp: Vec<f64> = (xs * b).iter().copied().collect();
        let pen: f64 = (0..b.len()).map(|k| 0.5 * alpha[k] * b[k] * b[k] + l1[k] * b[k].abs()).sum();
        loglik(resp, &lp) - pen
    };
    let scale: Vec<f64> = (0..xs.ncols()).map(|k| xs.column(k).amax().max(1e-300)).collect();
    let cd = WeightedCd { x: xs, alpha: alpha.to_vec(), l1: l1.to_vec() };
    let mut obj = objective(beta);
    for _ in 0..100 {
        let lp: Vec<f64> = (xs * &*beta).iter().copied().collect();
        let (w, r) = working(resp, &lp)?;
        let z: Vec<f64> = (0..lp.len()).map(|i| lp[i] + r[i] / w[i]).collect();
        let mut cand = beta.clone();
        cd.solve(&w, &z, &mut cand, &scale);
        let mut cand_obj = objective(&cand);
        let mut step = 1.0;
        let slack = 1e-12 * (1.0 + obj.abs());
        while cand_obj < obj - slack && step > 1e-10 {
            step *= 0.5;
            cand = &*beta + (&cand - &*beta) * 0.5;
            cand_obj = objective(&cand);
        }
        if cand_obj < obj - slack {
            return Ok(());
        }
        let change = (cand_obj - obj).abs() / (cand_obj.abs() + 0.1);
        let moved = (&cand - &*beta).amax();
        *beta = cand;
        obj = cand_obj;
        if matches!(resp, Response::Gaussian { .. }) || (change < 1e-10 && moved < 1e-9) {
            return Ok(());
        }
    }
    Ok(())
}

/// Selection by an added L1 penalty on the design rescaled by the learnt
/// local variances, with the ridge part fixed at `1/τ²_global`. λ₁ is
/// located by bisection on a 100-point path so that `target_count`
/// penalised covariates are non-zero.
pub fn select_l1(
    model: &FittedModel,
    x: &DMatrix<f64>,
    resp: &Response,
    target_count: usize,
    mode: RefitMode,
) -> Result<SelectionResult> {
    check_model(model, x)?;
    let cand = selectable(model);
    if target_count == 0 || target_count > cand.len() {
        return Err(EcpcError::invalid(format!(
            "target count {target_count} outside 1..={} selectable covariates",
            cand.len()
        )));
    }
    let resp = model.response_for(resp);
    let unpen: Vec<usize> = (0..model.p()).filter(|&k| model.unpenalized[k]).collect();
    // columns: selectable penalised (rescaled) first, then unpenalised
    let cols: Vec<usize> = cand.iter().chain(unpen.iter()).copied().collect();
    let mut xs = select_columns(x, &cols);
    for (j, &k) in cand.iter().enumerate() {
        xs.column_mut(j).scale_mut(model.tau_local[k].sqrt());
    }
    let m = cand.len();
    let alpha: Vec<f64> = (0..cols.len()).map(|j| if j < m { 1.0 / model.tau_global } else { 0.0 }).collect();

    // null model: only unpenalised covariates
    let mut beta0 = DVector::zeros(cols.len());
    let huge = vec![f64::INFINITY; cols.len()];
    let null_l1: Vec<f64> = (0..cols.len()).map(|j| if j < m { huge[j] } else { 0.0 }).collect();
    if !unpen.is_empty() {
        elastic_net(&xs, &resp, &alpha, &null_l1, &mut beta0)?;
    }
    let lp0: Vec<f64> = (&xs * &beta0).iter().copied().collect();
    let (_, r0) = working(&resp, &lp0)?;
    let lambda_max = (0..m).map(|j| xs.column(j).iter().zip(&r0).map(|(a, b)| a * b).sum::<f64>().abs()).fold(0.0, f64::max);
    if lambda_max == 0.0 {
        return Err(EcpcError::Numeric("no covariate has a non-zero score at the null model".into()));
    }
    let l1_at = |lam: f64| -> Vec<f64> { (0..cols.len()).map(|j| if j < m { lam } else { 0.0 }).collect() };
    let count = |b: &DVector<f64>| (0..m).filter(|&j| b[j] != 0.0).count();

    let mut path = logspace(lambda_max * 1e-4, lambda_max, 100);
    path.reverse();
    path.push(0.0);
    let mut beta = beta0.clone();
    let mut prev: Option<(f64, DVector<f64>)> = None;
    let mut found: Option<(f64, DVector<f64>, bool)> = None;
    let mut last_count = 0;
    for &lam in &path {
        elastic_net(&xs, &resp, &alpha, &l1_at(lam), &mut beta)?;
        let c = count(&beta);
        if c < last_count {
            warn!("selection count decreased along the λ₁ path");
        }
        last_count = c;
        if c == target_count {
            found = Some((lam, beta.clone(), true));
            break;
        }
        if c > target_count {
            // bisect on log scale between the previous λ (fewer) and this one (more)
            let (mut hi, mut b_hi) = prev.clone().unwrap_or((lambda_max, beta0.clone()));
            let (mut lo, mut b_lo) = (lam, beta.clone());
            for _ in 0..60 {
                let mid = if lo == 0.0 { hi * 1e-3 } else { (hi * lo).sqrt() };
                let mut b = b_hi.clone();
                elastic_net(&xs, &resp, &alpha, &l1_at(mid), &mut b)?;
                let cm = count(&b);
                if cm == target_count {
                    found = Some((mid, b, true));
                    break;
                }
                if cm < target_count {
                    hi = mid;
                    b_hi = b;
                } else {
                    lo = mid;
                    b_lo = b;
                }
                if (hi - lo).abs() <= 1e-14 * hi {
                    break;
                }
            }
            if found.is_none() {
                found = Some((lo, b_lo, false));
            }
            break;
        }
        prev = Some((lam, beta.clone()));
    }
    let (lam, b, exact) = found.ok_or_else(|| EcpcError::Numeric("λ₁ path never reached the target count".into()))?;
    let mut order: Vec<usize> = (0..m).filter(|&j| b[j] != 0.0).collect();
    order.sort_by(|&i, &j| b[j].abs().total_cmp(&b[i].abs()).then(i.cmp(&j)));
    order.truncate(target_count);
    if !exact {
        warn!("target count {target_count} not attained exactly; ties broken by coefficient size");
    }
    let mut selected: Vec<usize> = order.iter().map(|&j| cand[j]).collect();
    selected.sort_unstable();
    let beta_refit = refit_selected(model, x, &resp, &selected, mode)?;
    Ok(SelectionResult { selected, method: SelectionMethod::L1, tuning: lam, beta: beta_refit, refit: mode, exact })
}

/// Adaptive-lasso fit `argmin Σ_j (λ/|β̂_j|)|γ_j| + (1/n)‖Xβ̂ − Xγ‖²`.
/// Covariates with `β̂_j = 0` are excluded; unpenalised ones are unpenalised.
pub fn dss_coefficients(model: &FittedModel, x: &DMatrix<f64>, lambda: f64) -> Result<Vec<f64>> {
    check_model(model, x)?;
    if !(lambda >= 0.0) {
        return Err(EcpcError::invalid("λ must be non-negative"));
    }
    let n = x.nrows() as f64;
    let p = model.p();
    let active: Vec<usize> = (0..p).filter(|&k| model.unpenalized[k] || model.beta[k] != 0.0).collect();
    let xa = select_columns(x, &active);
    let target: Vec<f64> = (x * DVector::from_column_slice(&model.beta)).iter().copied().collect();
    // (1/n)‖t − Xγ‖² = (2/n)·½‖t − Xγ‖², so weights 2/n and penalties λ_j
    let w = vec![2.0 / n; x.nrows()];
    let l1: Vec<f64> = active
        .iter()
        .map(|&k| if model.unpenalized[k] { 0.0 } else { lambda / model.beta[k].abs() })
        .collect();
    let cd = WeightedCd { x: &xa, alpha: vec![0.0; active.len()], l1 };
    let mut g = DVector::from_iterator(active.len(), active.iter().map(|&k| model.beta[k]));
    let scale: Vec<f64> = (0..active.len()).map(|j| xa.column(j).amax().max(1e-300)).collect();
    cd.solve(&w, &target, &mut g, &scale);
    let mut out = vec![0.0; p];
    for (j, &k) in active.iter().enumerate() {
        out[k] = g[j];
    }
    Ok(out)
}

/// DSS selection at a given λ.
pub fn select_dss(
    model: &FittedModel,
    x: &DMatrix<f64>,
    resp: &Response,
    lambda: f64,
    mode: RefitMode,
) -> Result<SelectionResult> {
    let g = dss_coefficients(model, x, lambda)?;
    let selected: Vec<usize> = (0..model.p()).filter(|&k| !model.unpenalized[k] && g[k] != 0.0).collect();
    if selected.is_empty() && model.unpenalized.iter().all(|&u| !u) {
        return Ok(SelectionResult {
            selected,
            method: SelectionMethod::Dss,
            tuning: lambda,
            beta: vec![0.0; model.p()],
            refit: mode,
            exact: true,
        });
    }
    let resp = model.response_for(resp);
    let beta = refit_selected(model, x, &resp, &selected, mode)?;
    Ok(SelectionResult { selected, method: SelectionMethod::Dss, tuning: lambda, beta, refit: mode, exact: true })
}

/// Smallest λ at which DSS selects nothing (no unpenalised covariates).
pub fn dss_lambda_max(model: &FittedModel, x: &DMatrix<f64>) -> f64 {
    let n = x.nrows() as f64;
    let target = x * DVector::from_column_slice(&model.beta);
    (0..model.p())
        .filter(|&k| !model.unpenalized[k] && model.beta[k] != 0.0)
        .map(|k| model.beta[k].abs() * (2.0 / n) * x.column(k).dot(&target).abs())
        .fold(0.0, f64::max)
}

/// DSS with λ bisected (log scale) to hit a target count.
pub fn select_dss_count(
    model: &FittedModel,
    x: &DMatrix<f64>,
    resp: &Response,
    target_count: usize,
    mode: RefitMode,
) -> Result<SelectionResult> {
    check_model(model, x)?;
    let nonzero = (0..model.p()).filter(|&k| !model.unpenalized[k] && model.beta[k] != 0.0).count();
    if target_count == 0 || target_count > nonzero {
        return Err(EcpcError::invalid(format!("target count {target_count} outside 1..={nonzero}")));
    }
    let count = |g: &[f64]| (0..model.p()).filter(|&k| !model.unpenalized[k] && g[k] != 0.0).count();
    let mut hi = dss_lambda_max(model, x).max(f64::MIN_POSITIVE) * 2.0;
    let mut lo = hi * 1e-12;
    let mut best = dss_coefficients(model, x, lo)?;
    let mut exact = count(&best) == target_count;
    let mut lam = lo;
    if !exact {
        for _ in 0..200 {
            let mid = (hi * lo).sqrt();
            let g = dss_coefficients(model, x, mid)?;
            let c = count(&g);
            if c == target_count {
                best = g;
                lam = mid;
                exact = true;
                break;
            }
            if c < target_count {
                hi = mid;
            } else {
                lo = mid;
                best = g;
                lam = mid;
            }
            if hi / lo < 1.0 + 1e-12 {
                break;
            }
        }
    }
    let mut order: Vec<usize> = (0..model.p()).filter(|&k| !model.unpenalized[k] && best[k] != 0.0).collect();
    order.sort_by(|&i, &j| best[j].abs().total_cmp(&best[i].abs()).then(i.cmp(&j)));
    order.truncate(target_count);
    order.sort_unstable();
    let resp = model.response_for(resp);
    let beta = refit_selected(model, x, &resp, &order, mode)?;
    Ok(SelectionResult { selected: order, method: SelectionMethod::Dss, tuning: lam, beta, refit: mode, exact })
}

/// Marginal posterior standard deviations of the selectable penalised
/// covariates from the Laplace approximation at the posterior mode:
/// `sd_j = Δ_jj^{-1/2} (1 − [V D²(D² + I)⁻¹Vᵀ]_jj)^{1/2}` where `V D` is the
/// eigen-factor of `X̃ᵀX̃`, `X̃ = W̄^{1/2} X Δ^{-1/2}` and `W̄` the weights with
/// unpenalised covariates profiled out.
pub fn posterior_sds(model: &FittedModel, x: &DMatrix<f64>, resp: &Response) -> Result<(Vec<usize>, Vec<f64>)> {
    check_model(model, x)?;
    let resp = model.response_for(resp);
    let lp: Vec<f64> = (x * DVector::from_column_slice(&model.beta)).iter().copied().collect();
    let w = match &resp {
        Response::Cox { time, status } => {
            let h0 = breslow_cumhaz(time, status, &lp)?;
            weight_matrix(&resp, &lp, Some(&h0))?
        }
        _ => weight_matrix(&resp, &lp, None)?,
    };
    let cand = selectable(model);
    let unpen: Vec<usize> = (0..model.p()).filter(|&k| model.unpenalized[k]).collect();
    let cols: Vec<usize> = cand.iter().chain(unpen.iter()).copied().collect();
    let xs = select_columns(x, &cols);
    let mask: Vec<bool> = (0..cols.len()).map(|j| j >= cand.len()).collect();
    let design = PenalisedDesign::new(&xs, &DVector::from_vec(w), &mask)?;
    let omega: Vec<f64> = cand.iter().map(|&k| 1.0 / (model.tau_global * model.tau_local[k])).collect();
    let (h, d2) = scaled_gram_factor(&design.f, &omega);
    let mut sds = Vec::with_capacity(cand.len());
    for j in 0..cand.len() {
        let lev: f64 = (0..h.ncols()).map(|i| h[(j, i)] * h[(j, i)] / (1.0 + d2[i])).sum();
        let v = (1.0 - lev).max(0.0) / omega[j];
        if !(v > 0.0) {
            return Err(EcpcError::Numeric(format!("posterior sd of covariate {} is zero", cand[j] + 1)));
        }
        sds.push(v.sqrt());
    }
    Ok((cand, sds))
}

/// Marginal credible-region selection: keep the `target_count` covariates
/// with the largest `|β̂_j|/s_j`, `s_j = sd_j / min sd`.
pub fn select_credible(
    model: &FittedModel,
    x: &DMatrix<f64>,
    resp: &Response,
    target_count: usize,
    mode: RefitMode,
) -> Result<SelectionResult> {
    let (cand, sds) = posterior_sds(model, x, resp)?;
    if target_count == 0 || target_count > cand.len() {
        return Err(EcpcError::invalid(format!("target count {target_count} outside 1..={}", cand.len())));
    }
    let min_sd = sds.iter().cloned().fold(f64::INFINITY, f64::min);
    let stat: Vec<f64> = (0..cand.len()).map(|j| model.beta[cand[j]].abs() / (sds[j] / min_sd)).collect();
    let mut order: Vec<usize> = (0..cand.len()).collect();
    order.sort_by(|&i, &j| stat[j].total_cmp(&stat[i]).then(i.cmp(&j)));
    let threshold = stat[order[target_count - 1]];
    let exact = target_count == cand.len() || stat[order[target_count]] < threshold;
    let mut selected: Vec<usize> = order[..target_count].iter().map(|&j| cand[j]).collect();
    selected.sort_unstable();
    let resp = model.response_for(resp);
    let beta = refit_selected(model, x, &resp, &selected, mode)?;
    Ok(SelectionResult { selected, method: SelectionMethod::Credible, tuning: threshold, beta, refit: mode, exact })
}

/// Refit on the selected penalised covariates plus all unpenalised ones.
/// Dense mode keeps the learnt variances; recalibrated mode resets local
/// variances to one and re-estimates the global variance on the submatrix.
pub fn refit_selected(
    model: &FittedModel,
    x: &DMatrix<f64>,
    resp: &Response,
    selected: &[usize],
    mode: RefitMode,
) -> Result<Vec<f64>> {
    check_model(model, x)?;
    if selected.is_empty() {
        return Err(EcpcError::invalid("no covariates selected"));
    }
    if let Some(&k) = selected.iter().find(|&&k| k >= model.p() || model.unpenalized[k]) {
        return Err(EcpcError::invalid(format!("covariate {} is not a selectable penalised covariate", k + 1)));
    }
    let p = model.p();
    let mut keep = vec![false; p];
    for &k in selected {
        keep[k] = true;
    }
    match mode {
        RefitMode::Dense => {
            let tau_local: Vec<f64> =
                (0..p).map(|k| if model.unpenalized[k] { 0.0 } else if keep[k] { model.tau_local[k] } else { 0.0 }).collect();
            let pen = PenaltyState::new(model.tau_global, tau_local, model.unpenalized.clone())?;
            let resp = model.response_for(resp);
            Ok(fit_weighted_ridge(x, &resp, &pen, &FitOptions::default())?.beta)
        }
        RefitMode::Recalibrated => {
            let cols: Vec<usize> = (0..p).filter(|&k| keep[k] || model.unpenalized[k]).collect();
            let xs = select_columns(x, &cols);
            let mask: Vec<bool> = cols.iter().map(|&k| model.unpenalized[k]).collect();
            let raw = match resp {
                Response::Gaussian { y, .. } => Response::Gaussian { y: y.clone(), sigma2: None },
                other => other.clone(),
            };
            let gv = estimate_global_variance(&xs, &raw, &mask, &GlobalOptions::default())?;
            let resp1 = match gv.sigma2 {
                Some(s) => raw.with_sigma2(s),
                None => raw,
            };
            let pen = PenaltyState::ordinary(gv.tau_global, mask)?;
            let b = fit_weighted_ridge(&xs, &resp1, &pen, &FitOptions::default())?.beta;
            let mut out = vec![0.0; p];
            for (j, &k) in cols.iter().enumerate() {
                out[k] = b[j];
            }
            Ok(out)
        }
    }
}
