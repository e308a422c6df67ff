//! Weighted-ridge penalised GLMs: linear, logistic and Cox.
//!
//! All families are fitted by penalised iteratively reweighted least squares
//! on the posterior-mode objective `loglik(β) − ½ βᵀ Ω β` with a diagonal
//! precision `Ω`. Each weighted least-squares step is solved in the primal
//! (`p × p`) form when the penalised block is narrow and in the dual
//! (`n × n`, Woodbury) form otherwise; unpenalised columns are profiled out
//! first, see [`PenalisedDesign`].

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EcpcError, Result};
use crate::linalg::{
    least_squares_min_norm, logspace, orthogonal_complement, select_columns, select_rows, sym_eigen_sorted,
    PenalisedDesign,
};

/// Working weights are floored here so the working response stays finite.
const MIN_WORKING_WEIGHT: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Binomial,
    Cox,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Family::Gaussian => "gaussian",
            Family::Binomial => "binomial",
            Family::Cox => "cox",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Family {
    type Err = EcpcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "linear" => Ok(Family::Gaussian),
            "binomial" | "logistic" => Ok(Family::Binomial),
            "cox" | "survival" => Ok(Family::Cox),
            other => Err(EcpcError::invalid(format!("unknown family '{other}'"))),
        }
    }
}

/// Response vector together with its family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Response {
    Gaussian { y: Vec<f64>, sigma2: Option<f64> },
    Binomial { y: Vec<f64> },
    Cox { time: Vec<f64>, status: Vec<f64> },
}

impl Response {
    pub fn gaussian(y: Vec<f64>, sigma2: Option<f64>) -> Result<Self> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(EcpcError::invalid("gaussian response contains non-finite values"));
        }
        if let Some(s) = sigma2 {
            if !(s > 0.0 && s.is_finite()) {
                return Err(EcpcError::invalid("noise variance must be positive"));
            }
        }
        Ok(Response::Gaussian { y, sigma2 })
    }

    pub fn binomial(y: Vec<f64>) -> Result<Self> {
        if let Some(i) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(EcpcError::invalid(format!("binomial response row {} is {}, expected 0 or 1", i + 1, y[i])));
        }
        Ok(Response::Binomial { y })
    }

    pub fn cox(time: Vec<f64>, status: Vec<f64>) -> Result<Self> {
        if time.len() != status.len() {
            return Err(EcpcError::dim("survival times and status differ in length"));
        }
        if let Some(i) = time.iter().position(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(EcpcError::invalid(format!("survival time row {} must be positive", i + 1)));
        }
        if let Some(i) = status.iter().position(|&d| d != 0.0 && d != 1.0) {
            return Err(EcpcError::invalid(format!("status row {} is {}, expected 0 or 1", i + 1, status[i])));
        }
        Ok(Response::Cox { time, status })
    }

    pub fn family(&self) -> Family {
        match self {
            Response::Gaussian { .. } => Family::Gaussian,
            Response::Binomial { .. } => Family::Binomial,
            Response::Cox { .. } => Family::Cox,
        }
    }

    pub fn n(&self) -> usize {
        match self {
            Response::Gaussian { y, .. } | Response::Binomial { y } => y.len(),
            Response::Cox { time, .. } => time.len(),
        }
    }

    pub fn sigma2(&self) -> Option<f64> {
        match self {
            Response::Gaussian { sigma2, .. } => *sigma2,
            _ => None,
        }
    }

    pub fn with_sigma2(&self, s: f64) -> Self {
        match self {
            Response::Gaussian { y, .. } => Response::Gaussian { y: y.clone(), sigma2: Some(s) },
            other => other.clone(),
        }
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        let pick = |v: &Vec<f64>| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        match self {
            Response::Gaussian { y, sigma2 } => Response::Gaussian { y: pick(y), sigma2: *sigma2 },
            Response::Binomial { y } => Response::Binomial { y: pick(y) },
            Response::Cox { time, status } => Response::Cox { time: pick(time), status: pick(status) },
        }
    }

    /// Labels used for stratified fold assignment: class for binomial,
    /// event status for cox, a single stratum for gaussian.
    pub fn strata(&self) -> Vec<usize> {
        match self {
            Response::Gaussian { y, .. } => vec![0; y.len()],
            Response::Binomial { y } => y.iter().map(|&v| v as usize).collect(),
            Response::Cox { status, .. } => status.iter().map(|&v| v as usize).collect(),
        }
    }
}

/// Prior variances and the unpenalised mask.
///
/// A penalised covariate with `tau_local == 0` is excluded from the fit
/// (its coefficient is fixed at zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyState {
    pub tau_global: f64,
    pub tau_local: Vec<f64>,
    pub unpenalized: Vec<bool>,
}

impl PenaltyState {
    pub fn new(tau_global: f64, tau_local: Vec<f64>, unpenalized: Vec<bool>) -> Result<Self> {
        if !(tau_global > 0.0 && tau_global.is_finite()) {
            return Err(EcpcError::invalid(format!("global prior variance must be positive, got {tau_global}")));
        }
        if tau_local.len() != unpenalized.len() {
            return Err(EcpcError::dim("local variances and unpenalised mask differ in length"));
        }
        if let Some(k) = tau_local.iter().position(|&t| !(t >= 0.0 && t.is_finite())) {
            return Err(EcpcError::invalid(format!("local variance of covariate {} is {}", k + 1, tau_local[k])));
        }
        Ok(Self { tau_global, tau_local, unpenalized })
    }

    /// Ordinary ridge: every local variance equal to one.
    pub fn ordinary(tau_global: f64, unpenalized: Vec<bool>) -> Result<Self> {
        Self::new(tau_global, vec![1.0; unpenalized.len()], unpenalized)
    }

    pub fn p(&self) -> usize {
        self.tau_local.len()
    }

    /// `Ω_kk = 1/(τ²_global τ²_k,local)`, zero on unpenalised covariates and
    /// infinite on excluded ones.
    pub fn precision_diag(&self) -> Vec<f64> {
        (0..self.p())
            .map(|k| {
                if self.unpenalized[k] {
                    0.0
                } else if self.tau_local[k] == 0.0 {
                    f64::INFINITY
                } else {
                    1.0 / (self.tau_global * self.tau_local[k])
                }
            })
            .collect()
    }

    pub fn is_excluded(&self, k: usize) -> bool {
        !self.unpenalized[k] && self.tau_local[k] == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeFit {
    pub beta: Vec<f64>,
    pub linear_predictor: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub deviance: f64,
    /// Logistic data whose fitted linear predictor separates the classes.
    pub separation: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolvePath {
    #[default]
    Auto,
    Primal,
    Dual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Relative change in the penalised objective.
    pub tol: f64,
    pub path: SolvePath,
    pub init: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-8, path: SolvePath::Auto, init: None }
    }
}

pub fn check_design(x: &DMatrix<f64>, resp: &Response) -> Result<()> {
    if x.nrows() != resp.n() {
        return Err(EcpcError::dim(format!("X has {} rows but the response has {}", x.nrows(), resp.n())));
    }
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        let (i, j) = (pos % x.nrows(), pos / x.nrows());
        return Err(EcpcError::invalid(format!("X[{}, {}] is not finite", i + 1, j + 1)));
    }
    Ok(())
}

/// Penalised weighted least squares:
/// `argmin ½‖W^{1/2}(z − Xβ)‖² + ½ Σ ω_k β_k²` with `ω_k = 0` on
/// unpenalised columns.
pub fn penalised_wls(
    x: &DMatrix<f64>,
    w: &DVector<f64>,
    z: &DVector<f64>,
    omega: &[f64],
    unpenalized: &[bool],
    path: SolvePath,
) -> Result<DVector<f64>> {
    let design = PenalisedDesign::new(x, w, unpenalized)?;
    let zt = design.project(z);
    let (r, m) = design.f.shape();
    let om: Vec<f64> = design.pen_idx.iter().map(|&k| omega[k]).collect();
    let beta_p = if m == 0 {
        DVector::zeros(0)
    } else {
        let primal = match path {
            SolvePath::Primal => true,
            SolvePath::Dual => false,
            SolvePath::Auto => m <= r,
        };
        if primal {
            let mut a = design.f.transpose() * &design.f;
            for j in 0..m {
                a[(j, j)] += om[j];
            }
            let rhs = design.f.transpose() * &zt;
            match Cholesky::new(a.clone()) {
                Some(ch) => ch.solve(&rhs),
                None => least_squares_min_norm(&a, &rhs)?,
            }
        } else {
            if om.iter().any(|&o| o <= 0.0) {
                return Err(EcpcError::Singular("dual solve needs a positive penalty on every penalised column".into()));
            }
            let mut fo = design.f.clone();
            for j in 0..m {
                fo.column_mut(j).scale_mut(1.0 / om[j]);
            }
            let mut k = &fo * design.f.transpose();
            for i in 0..r {
                k[(i, i)] += 1.0;
            }
            let ch = Cholesky::new(k).ok_or_else(|| EcpcError::Singular("n × n kernel not positive definite".into()))?;
            let alpha = ch.solve(&zt);
            fo.transpose() * alpha
        }
    };
    let p = x.ncols();
    let mut beta = DVector::zeros(p);
    for (j, &k) in design.pen_idx.iter().enumerate() {
        beta[k] = beta_p[j];
    }
    if !design.unpen_idx.is_empty() {
        let xp = select_columns(x, &design.pen_idx);
        let resid = z - xp * beta_p;
        let mut xu = select_columns(x, &design.unpen_idx);
        let mut rw = resid;
        for i in 0..x.nrows() {
            xu.row_mut(i).scale_mut(design.sqrt_w[i]);
            rw[i] *= design.sqrt_w[i];
        }
        let beta_u = least_squares_min_norm(&xu, &rw)?;
        for (j, &k) in design.unpen_idx.iter().enumerate() {
            beta[k] = beta_u[j];
        }
    }
    Ok(beta)
}

// ---------------------------------------------------------------------------
// Cox helpers
// ---------------------------------------------------------------------------

/// Sample indices ordered by time, grouped into blocks of tied times.
fn time_blocks(time: &[f64]) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut order: Vec<usize> = (0..time.len()).collect();
    order.sort_by(|&a, &b| time[a].total_cmp(&time[b]));
    let mut blocks = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && time[order[end]] == time[order[start]] {
            end += 1;
        }
        blocks.push((start, end));
        start = end;
    }
    (order, blocks)
}

/// Breslow cumulative baseline hazard `H₀(t_i)` at every sample time, with
/// the linear predictor shifted by `shift` (so the returned values are
/// `H₀(t_i)·e^{shift}`).
fn breslow_shifted(time: &[f64], status: &[f64], lp: &[f64], shift: f64) -> Vec<f64> {
    let n = time.len();
    let (order, blocks) = time_blocks(time);
    let mut suffix = vec![0.0; n + 1];
    for pos in (0..n).rev() {
        suffix[pos] = suffix[pos + 1] + (lp[order[pos]] - shift).exp();
    }
    let mut h0 = vec![0.0; n];
    let mut cum = 0.0;
    for &(s, e) in &blocks {
        let d: f64 = (s..e).map(|pos| status[order[pos]]).sum();
        if d > 0.0 {
            cum += d / suffix[s];
        }
        for pos in s..e {
            h0[order[pos]] = cum;
        }
    }
    h0
}

/// Breslow estimate of the cumulative baseline hazard at each sample's time.
///
/// `h₀(t) = d(t) / Σ_{j: t_j ≥ t} exp(lp_j)` at event times and
/// `H₀(t_i) = Σ_{t ≤ t_i} h₀(t)`; tied times share one risk set.
pub fn breslow_cumhaz(time: &[f64], status: &[f64], lp: &[f64]) -> Result<Vec<f64>> {
    if time.len() != status.len() || time.len() != lp.len() {
        return Err(EcpcError::dim("times, status and linear predictor differ in length"));
    }
    Ok(breslow_shifted(time, status, lp, 0.0))
}

/// Martingale residuals `d_i − H₀(t_i) exp(lp_i)`.
pub fn martingale_residuals(time: &[f64], status: &[f64], lp: &[f64], h0: &[f64]) -> Result<Vec<f64>> {
    let n = time.len();
    if status.len() != n || lp.len() != n || h0.len() != n {
        return Err(EcpcError::dim("martingale residual inputs differ in length"));
    }
    Ok((0..n).map(|i| status[i] - h0[i] * lp[i].exp()).collect())
}

/// Breslow-tie partial log-likelihood.
pub fn cox_partial_loglik(time: &[f64], status: &[f64], lp: &[f64]) -> f64 {
    let n = time.len();
    if n == 0 {
        return 0.0;
    }
    let shift = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (order, blocks) = time_blocks(time);
    let mut suffix = vec![0.0; n + 1];
    for pos in (0..n).rev() {
        suffix[pos] = suffix[pos + 1] + (lp[order[pos]] - shift).exp();
    }
    let mut ll = 0.0;
    for &(s, e) in &blocks {
        let log_risk = suffix[s].ln() + shift;
        for pos in s..e {
            let i = order[pos];
            if status[i] > 0.0 {
                ll += lp[i] - log_risk;
            }
        }
    }
    ll
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-likelihood of the response at linear predictor `lp` (up to constants
/// not depending on `lp`). For gaussian responses without a noise variance
/// the unit variance is used.
pub fn loglik(resp: &Response, lp: &[f64]) -> f64 {
    match resp {
        Response::Gaussian { y, sigma2 } => {
            let s2 = sigma2.unwrap_or(1.0);
            -0.5 * y.iter().zip(lp).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / s2
        }
        Response::Binomial { y } => y.iter().zip(lp).map(|(&yi, &e)| yi * e - softplus(e)).sum(),
        Response::Cox { time, status } => cox_partial_loglik(time, status, lp),
    }
}

/// Diagonal of the GLM weight matrix `W = Var(Y | β)` evaluated at `lp`.
///
/// Gaussian responses use the inverse noise variance `1/σ²` (the Fisher
/// information of the linear predictor); binomial uses `p̃(1 − p̃)`; cox uses
/// `H₀(t_i) exp(lp_i)` and needs the Breslow baseline `h0`.
pub fn weight_matrix(resp: &Response, lp: &[f64], h0: Option<&[f64]>) -> Result<Vec<f64>> {
    if lp.len() != resp.n() {
        return Err(EcpcError::dim("linear predictor length differs from the response"));
    }
    match resp {
        Response::Gaussian { sigma2, .. } => {
            let s2 = sigma2.ok_or_else(|| EcpcError::invalid("gaussian weights need a noise variance"))?;
            Ok(vec![1.0 / s2; lp.len()])
        }
        Response::Binomial { .. } => Ok(lp
            .iter()
            .map(|&e| {
                let p = logistic(e);
                p * (1.0 - p)
            })
            .collect()),
        Response::Cox { .. } => {
            let h0 = h0.ok_or_else(|| EcpcError::invalid("cox weights need the baseline cumulative hazard"))?;
            if h0.len() != lp.len() {
                return Err(EcpcError::dim("baseline hazard length differs from the response"));
            }
            Ok(h0.iter().zip(lp).map(|(&h, &e)| h * e.exp()).collect())
        }
    }
}

/// Weight diagonal and score residual (`y − E y` or martingale residual) at `lp`.
fn working_quantities(resp: &Response, lp: &[f64]) -> (Vec<f64>, Vec<f64>) {
    match resp {
        Response::Gaussian { y, sigma2 } => {
            let s2 = sigma2.unwrap_or(1.0);
            (vec![1.0 / s2; lp.len()], y.iter().zip(lp).map(|(a, b)| (a - b) / s2).collect())
        }
        Response::Binomial { y } => {
            let mut w = Vec::with_capacity(lp.len());
            let mut r = Vec::with_capacity(lp.len());
            for (&yi, &e) in y.iter().zip(lp) {
                let p = logistic(e);
                w.push(p * (1.0 - p));
                r.push(yi - p);
            }
            (w, r)
        }
        Response::Cox { time, status } => {
            let shift = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let h0s = breslow_shifted(time, status, lp, shift);
            let w: Vec<f64> = (0..lp.len()).map(|i| h0s[i] * (lp[i] - shift).exp()).collect();
            let r: Vec<f64> = (0..lp.len()).map(|i| status[i] - w[i]).collect();
            (w, r)
        }
    }
}

pub fn deviance(resp: &Response, lp: &[f64]) -> f64 {
    -2.0 * loglik(resp, lp)
}

fn penalised_objective(resp: &Response, lp: &[f64], beta: &DVector<f64>, omega: &[f64]) -> f64 {
    let pen: f64 = beta.iter().zip(omega).map(|(b, o)| if *o > 0.0 { o * b * b } else { 0.0 }).sum();
    loglik(resp, lp) - 0.5 * pen
}

/// Posterior mode of the weighted-ridge GLM.
pub fn fit_weighted_ridge(x: &DMatrix<f64>, resp: &Response, pen: &PenaltyState, opts: &FitOptions) -> Result<RidgeFit> {
    check_design(x, resp)?;
    if pen.p() != x.ncols() {
        return Err(EcpcError::dim(format!("X has {} columns but the penalty has {}", x.ncols(), pen.p())));
    }
    if let Response::Gaussian { sigma2: None, .. } = resp {
        return Err(EcpcError::invalid("gaussian fit needs a noise variance; estimate it first"));
    }
    let keep: Vec<usize> = (0..x.ncols()).filter(|&k| !pen.is_excluded(k)).collect();
    let n_unpen = (0..x.ncols()).filter(|&k| pen.unpenalized[k]).count();
    if n_unpen > 0 && n_unpen >= x.nrows() && keep.len() == n_unpen {
        return Err(EcpcError::invalid("not enough samples for the unpenalised covariates"));
    }
    let full_omega = pen.precision_diag();
    let xs = if keep.len() == x.ncols() { x.clone() } else { select_columns(x, &keep) };
    let omega: Vec<f64> = keep.iter().map(|&k| full_omega[k]).collect();
    let unpen: Vec<bool> = keep.iter().map(|&k| pen.unpenalized[k]).collect();
    let init = opts.init.as_ref().map(|b| DVector::from_iterator(keep.len(), keep.iter().map(|&k| b[k])));

    let (beta_s, converged, iterations) = irls(&xs, resp, &omega, &unpen, opts, init)?;
    let mut beta = vec![0.0; x.ncols()];
    for (j, &k) in keep.iter().enumerate() {
        beta[k] = beta_s[j];
    }
    let lp: Vec<f64> = (&xs * &beta_s).iter().copied().collect();
    let separation = match resp {
        Response::Binomial { y } => {
            let max0 = lp.iter().zip(y).filter(|(_, &v)| v == 0.0).map(|(e, _)| *e).fold(f64::NEG_INFINITY, f64::max);
            let min1 = lp.iter().zip(y).filter(|(_, &v)| v == 1.0).map(|(e, _)| *e).fold(f64::INFINITY, f64::min);
            max0.is_finite() && min1.is_finite() && max0 < min1
        }
        _ => false,
    };
    if separation {
        warn!("logistic data are separated; returning the penalised optimum");
    }
    Ok(RidgeFit { deviance: deviance(resp, &lp), beta, linear_predictor: lp, converged, iterations, separation })
}

fn irls(
    x: &DMatrix<f64>,
    resp: &Response,
    omega: &[f64],
    unpen: &[bool],
    opts: &FitOptions,
    init: Option<DVector<f64>>,
) -> Result<(DVector<f64>, bool, usize)> {
    let p = x.ncols();
    if let Response::Gaussian { y, sigma2 } = resp {
        let s2 = sigma2.expect("checked by caller");
        let w = DVector::from_element(x.nrows(), 1.0 / s2);
        let z = DVector::from_column_slice(y);
        return Ok((penalised_wls(x, &w, &z, omega, unpen, opts.path)?, true, 1));
    }
    let mut beta = init.unwrap_or_else(|| DVector::zeros(p));
    let mut lp = x * &beta;
    let mut obj = penalised_objective(resp, lp.as_slice(), &beta, omega);
    let mut last_change = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let (w, r) = working_quantities(resp, lp.as_slice());
        let wv = DVector::from_iterator(w.len(), w.iter().map(|&v| v.max(MIN_WORKING_WEIGHT)));
        let z = DVector::from_fn(w.len(), |i, _| lp[i] + r[i] / wv[i]);
        let target = penalised_wls(x, &wv, &z, omega, unpen, opts.path)?;
        let dir = &target - &beta;
        let mut step = 1.0;
        let mut cand = target;
        let mut cand_lp = x * &cand;
        let mut cand_obj = penalised_objective(resp, cand_lp.as_slice(), &cand, omega);
        let slack = 1e-10 * (1.0 + obj.abs());
        let mut halvings = 0;
        while !(cand_obj >= obj - slack) && halvings < 40 {
            step *= 0.5;
            cand = &beta + &dir * step;
            cand_lp = x * &cand;
            cand_obj = penalised_objective(resp, cand_lp.as_slice(), &cand, omega);
            halvings += 1;
        }
        if !cand_obj.is_finite() {
            return Err(EcpcError::Numeric("penalised objective became non-finite".into()));
        }
        let dbeta = (&cand - &beta).amax();
        let scale = 1.0 + cand.amax();
        last_change = (cand_obj - obj).abs() / (cand_obj.abs() + 0.1);
        if cand_obj >= obj - slack {
            beta = cand;
            lp = cand_lp;
            obj = cand_obj;
        }
        debug!("irls iter {it}: objective {obj:.10e}, change {last_change:.3e}");
        if last_change < opts.tol && dbeta < 1e-7 * scale {
            return Ok((beta, true, it));
        }
        if halvings >= 40 {
            // no ascent possible along the Newton direction: at the optimum
            return Ok((beta, true, it));
        }
    }
    Err(EcpcError::NonConvergence { iterations: opts.max_iter, last_change, last_beta: beta.iter().copied().collect() })
}

// ---------------------------------------------------------------------------
// Global prior variance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalMethod {
    MarginalLikelihood,
    CrossValidation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalVariance {
    pub tau_global: f64,
    /// Noise variance (gaussian only): the supplied value or its joint estimate.
    pub sigma2: Option<f64>,
    pub method: GlobalMethod,
    /// `(λ, summed out-of-fold log-likelihood)` for the CV branch.
    pub cv_curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalOptions {
    pub folds: usize,
    pub lambda_grid: Vec<f64>,
    pub seed: u64,
    /// Explicit fold label per sample (overrides `folds`/`seed`).
    pub fold_ids: Option<Vec<usize>>,
}

impl Default for GlobalOptions {
    fn default() -> Self {
        Self { folds: 10, lambda_grid: logspace(1e-4, 1e6, 50), seed: 1, fold_ids: None }
    }
}

/// Bounds for the prior-variance search of the marginal-likelihood branch.
pub const TAU_SEARCH_MIN: f64 = 1e-10;
pub const TAU_SEARCH_MAX: f64 = 1e10;

/// Estimate the global prior variance with all local variances equal to one.
pub fn estimate_global_variance(
    x: &DMatrix<f64>,
    resp: &Response,
    unpenalized: &[bool],
    opts: &GlobalOptions,
) -> Result<GlobalVariance> {
    check_design(x, resp)?;
    if unpenalized.len() != x.ncols() {
        return Err(EcpcError::dim("unpenalised mask length differs from the column count"));
    }
    let pen_idx: Vec<usize> = (0..x.ncols()).filter(|&k| !unpenalized[k]).collect();
    if pen_idx.is_empty() {
        return Err(EcpcError::invalid("no penalised covariates"));
    }
    if pen_idx.iter().all(|&k| x.column(k).iter().all(|&v| v == 0.0)) {
        return Err(EcpcError::invalid("penalised design is identically zero"));
    }
    match resp {
        Response::Gaussian { y, sigma2 } => gaussian_marginal_ml(x, y, *sigma2, unpenalized),
        _ => cv_global(x, resp, unpenalized, opts),
    }
}

fn gaussian_marginal_ml(x: &DMatrix<f64>, y: &[f64], sigma2: Option<f64>, unpenalized: &[bool]) -> Result<GlobalVariance> {
    let pen_idx: Vec<usize> = (0..x.ncols()).filter(|&k| !unpenalized[k]).collect();
    let unpen_idx: Vec<usize> = (0..x.ncols()).filter(|&k| unpenalized[k]).collect();
    let yv = DVector::from_column_slice(y);
    let xp = select_columns(x, &pen_idx);
    let (yt, xt) = if unpen_idx.is_empty() {
        (yv, xp)
    } else {
        let basis = orthogonal_complement(&select_columns(x, &unpen_idx));
        (basis.transpose() * yv, basis.transpose() * xp)
    };
    let n = yt.len();
    if n == 0 {
        return Err(EcpcError::invalid("no residual degrees of freedom after removing unpenalised covariates"));
    }
    let (lam, vecs) = sym_eigen_sorted(&xt * xt.transpose());
    let lam: Vec<f64> = lam.iter().map(|&l| l.max(0.0)).collect();
    let u = vecs.transpose() * yt;
    let u2: Vec<f64> = u.iter().map(|v| v * v).collect();
    let yy: f64 = u2.iter().sum();
    if yy == 0.0 {
        return Ok(GlobalVariance {
            tau_global: TAU_SEARCH_MIN,
            sigma2: Some(sigma2.unwrap_or(TAU_SEARCH_MIN)),
            method: GlobalMethod::MarginalLikelihood,
            cv_curve: Vec::new(),
        });
    }
    let (lo, hi) = (TAU_SEARCH_MIN.ln(), TAU_SEARCH_MAX.ln());
    match sigma2 {
        Some(s2) => {
            let neg = |lt: f64| {
                let t = lt.exp();
                let mut v = 0.0;
                for i in 0..n {
                    let c = s2 + t * lam[i];
                    v += c.ln() + u2[i] / c;
                }
                0.5 * v
            };
            let lt = minimise_1d(neg, lo, hi);
            Ok(GlobalVariance {
                tau_global: lt.exp(),
                sigma2: Some(s2),
                method: GlobalMethod::MarginalLikelihood,
                cv_curve: Vec::new(),
            })
        }
        None => {
            let nf = n as f64;
            let sig = |r: f64| (0..n).map(|i| u2[i] / (1.0 + r * lam[i])).sum::<f64>() / nf;
            let neg = |lr: f64| {
                let r = lr.exp();
                let logdet: f64 = lam.iter().map(|&l| (1.0 + r * l).ln()).sum();
                0.5 * (logdet + nf * sig(r).ln() + nf)
            };
            let lr = minimise_1d(neg, lo, hi);
            let r = lr.exp();
            let s2 = sig(r);
            Ok(GlobalVariance {
                tau_global: r * s2,
                sigma2: Some(s2),
                method: GlobalMethod::MarginalLikelihood,
                cv_curve: Vec::new(),
            })
        }
    }
}

/// Grid scan followed by golden-section refinement on `[lo, hi]`.
fn minimise_1d<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64) -> f64 {
    let n = 201;
    let step = (hi - lo) / (n - 1) as f64;
    let vals: Vec<f64> = (0..n).map(|i| f(lo + step * i as f64)).collect();
    let best = (0..n)
        .filter(|&i| vals[i].is_finite())
        .min_by(|&a, &b| vals[a].total_cmp(&vals[b]))
        .unwrap_or(0);
    let mut a = lo + step * best.saturating_sub(1) as f64;
    let mut b = lo + step * (best + 1).min(n - 1) as f64;
    let gr = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - gr * (b - a);
    let mut d = a + gr * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..100 {
        if (b - a).abs() < 1e-10 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - gr * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + gr * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    if f(mid) <= vals[best] {
        mid
    } else {
        lo + step * best as f64
    }
}

/// Stratified fold labels: each stratum is shuffled and dealt round-robin.
pub fn stratified_folds(strata: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let n = strata.len();
    let k = folds.clamp(1, n.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![0; n];
    let mut levels: Vec<usize> = strata.to_vec();
    levels.sort_unstable();
    levels.dedup();
    let mut offset = 0;
    for lvl in levels {
        let mut idx: Vec<usize> = (0..n).filter(|&i| strata[i] == lvl).collect();
        idx.shuffle(&mut rng);
        for (j, &i) in idx.iter().enumerate() {
            labels[i] = (offset + j) % k;
        }
        offset += idx.len();
    }
    labels
}

fn cv_global(x: &DMatrix<f64>, resp: &Response, unpenalized: &[bool], opts: &GlobalOptions) -> Result<GlobalVariance> {
    let n = x.nrows();
    if opts.lambda_grid.is_empty() {
        return Err(EcpcError::invalid("empty λ grid"));
    }
    let labels = match &opts.fold_ids {
        Some(ids) => {
            if ids.len() != n {
                return Err(EcpcError::dim("fold ids length differs from the sample count"));
            }
            ids.clone()
        }
        None => {
            if n < 2 {
                return Err(EcpcError::invalid("cross-validation needs at least two samples"));
            }
            stratified_folds(&resp.strata(), opts.folds.min(n), opts.seed)
        }
    };
    let mut fold_list: Vec<usize> = labels.clone();
    fold_list.sort_unstable();
    fold_list.dedup();
    if fold_list.len() < 2 {
        return Err(EcpcError::invalid("cross-validation needs at least two folds"));
    }
    // descending λ so that each fit warm-starts from a more penalised one
    let mut grid = opts.lambda_grid.clone();
    grid.sort_by(|a, b| b.total_cmp(a));

    let per_fold: Vec<Vec<f64>> = fold_list
        .par_iter()
        .map(|&f| {
            let train: Vec<usize> = (0..n).filter(|&i| labels[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| labels[i] == f).collect();
            let xtr = select_rows(x, &train);
            let rtr = resp.subset(&train);
            let mut warm: Option<Vec<f64>> = None;
            grid.iter()
                .map(|&lam| {
                    let pen = PenaltyState::ordinary(1.0 / lam, unpenalized.to_vec()).expect("positive λ");
                    let fo = FitOptions { init: warm.clone(), ..FitOptions::default() };
                    let beta = match fit_weighted_ridge(&xtr, &rtr, &pen, &fo) {
                        Ok(fit) => fit.beta,
                        Err(EcpcError::NonConvergence { last_beta, .. }) => {
                            // keep the last iterate; it still scores the λ
                            let mut b = vec![0.0; x.ncols()];
                            b.copy_from_slice(&last_beta);
                            b
                        }
                        Err(_) => return f64::NEG_INFINITY,
                    };
                    warm = Some(beta.clone());
                    let bv = DVector::from_column_slice(&beta);
                    out_of_fold_loglik(x, resp, &bv, &train, &test)
                })
                .collect()
        })
        .collect();

    let mut curve: Vec<(f64, f64)> = grid
        .iter()
        .enumerate()
        .map(|(j, &lam)| (lam, per_fold.iter().map(|s| s[j]).sum::<f64>()))
        .collect();
    let best = curve
        .iter()
        .enumerate()
        .filter(|(_, (_, s))| s.is_finite())
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
        .map(|(j, _)| j)
        .ok_or_else(|| EcpcError::Numeric("no finite cross-validated likelihood".into()))?;
    let lam = curve[best].0;
    curve.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(GlobalVariance { tau_global: 1.0 / lam, sigma2: None, method: GlobalMethod::CrossValidation, cv_curve: curve })
}

/// Held-out log-likelihood; for cox the cross-validated partial likelihood
/// `ℓ(β) − ℓ_train(β)`.
pub fn out_of_fold_loglik(x: &DMatrix<f64>, resp: &Response, beta: &DVector<f64>, train: &[usize], test: &[usize]) -> f64 {
    match resp {
        Response::Cox { time, status } => {
            let lp: Vec<f64> = (x * beta).iter().copied().collect();
            let full = cox_partial_loglik(time, status, &lp);
            let pick = |v: &[f64]| train.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let tr = cox_partial_loglik(&pick(time), &pick(status), &pick(&lp));
            full - tr
        }
        _ => {
            let xt = select_rows(x, test);
            let lp: Vec<f64> = (xt * beta).iter().copied().collect();
            loglik(&resp.subset(test), &lp)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_x(n: usize, p: usize, salt: u64) -> DMatrix<f64> {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(salt);
        DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn gaussian_identity_closed_form() {
        let y = vec![1.0, -2.0, 0.5, 3.0];
        let x = DMatrix::identity(4, 4);
        let lambda = 0.7;
        let resp = Response::gaussian(y.clone(), Some(1.0)).unwrap();
        let pen = PenaltyState::ordinary(1.0 / lambda, vec![false; 4]).unwrap();
        let fit = fit_weighted_ridge(&x, &resp, &pen, &FitOptions::default()).unwrap();
        for k in 0..4 {
            assert!((fit.beta[k] - y[k] / (1.0 + lambda)).abs() < 1e-12);
        }
    }

    #[test]
    fn binomial_infinite_penalty_limit() {
        let mut x = toy_x(40, 3, 3);
        x = x.insert_column(3, 1.0);
        let y: Vec<f64> = (0..40).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let resp = Response::binomial(y).unwrap();
        let pen = PenaltyState::ordinary(1e-12, vec![false, false, false, true]).unwrap();
        let fit = fit_weighted_ridge(&x, &resp, &pen, &FitOptions::default()).unwrap();
        for k in 0..3 {
            assert!(fit.beta[k].abs() < 1e-8);
        }
        assert!((fit.beta[3] - (0.25f64 / 0.75).ln()).abs() < 1e-6);
    }

    #[test]
    fn binomial_weights_at_zero() {
        let resp = Response::binomial(vec![0.0, 1.0, 1.0]).unwrap();
        assert_eq!(weight_matrix(&resp, &[0.0; 3], None).unwrap(), vec![0.25; 3]);
    }

    #[test]
    fn gaussian_weights_are_inverse_noise_variance() {
        let resp = Response::gaussian(vec![0.0; 3], Some(2.0)).unwrap();
        assert_eq!(weight_matrix(&resp, &[0.0; 3], None).unwrap(), vec![0.5; 3]);
    }

    #[test]
    fn cox_weights_need_baseline() {
        let resp = Response::cox(vec![1.0, 2.0], vec![1.0, 1.0]).unwrap();
        assert!(weight_matrix(&resp, &[0.0, 0.0], None).is_err());
    }

    #[test]
    fn breslow_toy() {
        let h = breslow_cumhaz(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], &[0.0; 3]).unwrap();
        let expected = [1.0 / 3.0, 5.0 / 6.0, 11.0 / 6.0];
        for i in 0..3 {
            assert!((h[i] - expected[i]).abs() < 1e-15);
        }
        let resp = Response::cox(vec![1.0, 2.0, 3.0], vec![1.0; 3]).unwrap();
        let w = weight_matrix(&resp, &[0.0; 3], Some(&h)).unwrap();
        assert_eq!(w, h);
        let m = martingale_residuals(&[1.0, 2.0, 3.0], &[1.0; 3], &[0.0; 3], &h).unwrap();
        assert!((m[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn breslow_all_censored_and_single() {
        let h = breslow_cumhaz(&[1.0, 2.0], &[0.0, 0.0], &[0.3, -0.2]).unwrap();
        assert_eq!(h, vec![0.0, 0.0]);
        let m = martingale_residuals(&[1.0, 2.0], &[0.0, 0.0], &[0.3, -0.2], &h).unwrap();
        assert_eq!(m, vec![0.0, 0.0]);
        assert_eq!(breslow_cumhaz(&[1.0], &[1.0], &[0.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn breslow_ties_share_risk_set() {
        let h = breslow_cumhaz(&[1.0, 1.0, 2.0], &[1.0, 1.0, 1.0], &[0.0; 3]).unwrap();
        assert!((h[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((h[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((h[2] - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn gaussian_marginal_ml_zero_response() {
        let x = toy_x(10, 20, 5);
        let resp = Response::gaussian(vec![0.0; 10], None).unwrap();
        let gv = estimate_global_variance(&x, &resp, &[false; 20], &GlobalOptions::default()).unwrap();
        assert_eq!(gv.tau_global, TAU_SEARCH_MIN);
    }

    #[test]
    fn zero_design_rejected() {
        let x = DMatrix::zeros(5, 3);
        let resp = Response::gaussian(vec![1.0, 2.0, 0.0, 1.0, 3.0], None).unwrap();
        assert!(estimate_global_variance(&x, &resp, &[false; 3], &GlobalOptions::default()).is_err());
    }

    #[test]
    fn response_validation() {
        assert!(Response::binomial(vec![0.0, 2.0]).is_err());
        assert!(Response::cox(vec![0.0, 1.0], vec![1.0, 0.0]).is_err());
        assert!(Response::gaussian(vec![1.0], Some(0.0)).is_err());
    }

    #[test]
    fn stratified_folds_balance_classes() {
        let strata: Vec<usize> = (0..20).map(|i| (i < 6) as usize).collect();
        let labels = stratified_folds(&strata, 3, 9);
        for f in 0..3 {
            let ones = (0..20).filter(|&i| labels[i] == f && strata[i] == 1).count();
            assert_eq!(ones, 2);
        }
    }
}
