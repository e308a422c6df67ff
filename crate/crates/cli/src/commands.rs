//! The fit, predict, cv, simulate and stability commands.

use std::path::Path;

use ecpc_core::estimator::fit_ordinary_ridge;
use ecpc_core::glm::stratified_folds;
use ecpc_core::linalg::select_rows;
use ecpc_core::selection::{select_credible, select_dss_count, select_l1, SelectionMethod, SelectionResult};
use ecpc_core::{fit_ecpc, predict, CoDataSource, EcpcOptions, Family, FittedModel, Response};
use log::info;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{Command, RunConfig, SelectSpec};
use crate::data::{align_columns, fmt, read_matrix, read_response, write_table, write_text, Table};
use crate::error::{CliError, Result};
use crate::metrics::{auc, concordance, mse, MetricsRow};
use crate::simulate::{run_study, summarise, SimRow, SummaryRow};

pub const INTERCEPT: &str = "(intercept)";

/// Everything needed to fit: design, response, penalty mask and co-data.
pub struct Training {
    pub names: Vec<String>,
    pub x: DMatrix<f64>,
    pub resp: Response,
    pub unpenalized: Vec<bool>,
    pub sources: Vec<CoDataSource>,
}

fn with_intercept(mut table: Table) -> Table {
    let p = table.x.ncols();
    table.x = table.x.insert_column(p, 1.0);
    table.names.push(INTERCEPT.to_string());
    table
}

pub fn load_training(cfg: &RunConfig) -> Result<Training> {
    let x_path = cfg.x.as_deref().ok_or_else(|| CliError::Config("--x is required".into()))?;
    let y_path = cfg.y.as_deref().ok_or_else(|| CliError::Config("--y is required".into()))?;
    let mut table = read_matrix(x_path)?;
    if cfg.intercept {
        table = with_intercept(table);
    }
    let resp = read_response(y_path, cfg.family)?;
    if resp.n() != table.x.nrows() {
        return Err(CliError::format(
            y_path,
            format!("{} responses for {} rows of {}", resp.n(), table.x.nrows(), x_path.display()),
        ));
    }
    let mut unpenalized: Vec<bool> = table.names.iter().map(|n| n == INTERCEPT && cfg.intercept).collect();
    for name in &cfg.unpenalized {
        let k = table
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| CliError::Config(format!("unpenalised covariate '{name}' is not a column of {}", x_path.display())))?;
        unpenalized[k] = true;
    }
    let pen_names: Vec<String> = table.names.iter().zip(&unpenalized).filter(|(_, &u)| !u).map(|(n, _)| n.clone()).collect();
    let kinds = cfg.hyper_kinds()?;
    let sources = cfg
        .codata_specs()?
        .iter()
        .zip(kinds)
        .map(|(spec, kind)| Ok(CoDataSource::new(spec.load(&pen_names)?, kind)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Training { names: table.names, x: table.x, resp, unpenalized, sources })
}

pub fn options(cfg: &RunConfig, seed: u64) -> EcpcOptions {
    let mut o = EcpcOptions::default();
    o.global.folds = cfg.folds.max(2);
    o.global.seed = seed;
    o.tuning.n_splits = cfg.splits.max(1);
    o.tuning.seed = seed;
    o
}

pub fn run_selection(
    spec: &SelectSpec,
    model: &FittedModel,
    x: &DMatrix<f64>,
    resp: &Response,
) -> Result<SelectionResult> {
    let r = match spec.method {
        SelectionMethod::L1 => select_l1(model, x, resp, spec.count, spec.mode)?,
        SelectionMethod::Dss => select_dss_count(model, x, resp, spec.count, spec.mode)?,
        SelectionMethod::Credible => select_credible(model, x, resp, spec.count, spec.mode)?,
    };
    Ok(r)
}

/// Dispatch on the configured command.
pub fn run(cfg: &RunConfig) -> Result<()> {
    match cfg.validate()? {
        Command::Fit => cmd_fit(cfg).map(|_| ()),
        Command::Predict => cmd_predict(cfg).map(|_| ()),
        Command::Cv => cmd_cv(cfg).map(|_| ()),
        Command::Simulate => cmd_simulate(cfg).map(|_| ()),
        Command::Stability => cmd_stability(cfg).map(|_| ()),
    }
}

pub struct FitOutput {
    pub model: FittedModel,
    pub selection: Option<SelectionResult>,
}

/// Fit and write `model.json`, `group_weights.csv`, `fit.log` and, with a
/// selection, `selection.csv` and `model_selected.json`.
pub fn cmd_fit(cfg: &RunConfig) -> Result<FitOutput> {
    let seed = cfg.seed()?;
    let t = load_training(cfg)?;
    let mut model = fit_ecpc(&t.x, &t.resp, &t.sources, &t.unpenalized, &options(cfg, seed))?;
    model.covariate_names = t.names.clone();
    let out = &cfg.out;
    write_text(&out.join("model.json"), &model.to_json()?)?;

    let mut rows = Vec::new();
    for (d, gf) in model.groupings.iter().enumerate() {
        for (g, name) in gf.grouping.group_names.iter().enumerate() {
            rows.push(vec![
                gf.grouping.name.clone(),
                name.clone(),
                fmt(gf.gamma[g]),
                gf.selected[g].to_string(),
                fmt(gf.lambda),
                fmt(model.w[d]),
            ]);
        }
    }
    write_table(&out.join("group_weights.csv"), &["grouping", "group", "gamma", "selected", "lambda", "w"], &rows)?;

    let mut log = String::new();
    log.push_str(&format!("family {}\n", model.family));
    log.push_str(&format!("samples {}\ncovariates {}\n", t.x.nrows(), t.x.ncols()));
    log.push_str(&format!("tau_global {}\n", model.tau_global));
    if let Some(s) = model.sigma2 {
        log.push_str(&format!("sigma2 {s}\n"));
    }
    for (d, gf) in model.groupings.iter().enumerate() {
        log.push_str(&format!("grouping {} hyper {} lambda {} w {}\n", gf.grouping.name, gf.hyper, gf.lambda, model.w[d]));
    }
    log.push_str(&format!("converged {}\n", model.diagnostics.converged));

    let mut selection = None;
    if let Some(spec) = cfg.selection()? {
        let sel = run_selection(&spec, &model, &t.x, &t.resp)?;
        let rows: Vec<Vec<String>> = (0..model.p())
            .filter(|&k| sel.beta[k] != 0.0 || sel.selected.contains(&k) || model.unpenalized[k])
            .map(|k| vec![t.names[k].clone(), fmt(sel.beta[k])])
            .collect();
        write_table(&out.join("selection.csv"), &["covariate", "beta"], &rows)?;
        let mut sparse = model.clone();
        sparse.beta = sel.beta.clone();
        sparse.selected = Some(sel.selected.clone());
        write_text(&out.join("model_selected.json"), &sparse.to_json()?)?;
        log.push_str(&format!("selected {} (exact {})\n", sel.selected.len(), sel.exact));
        model.selected = Some(sel.selected.clone());
        selection = Some(sel);
    }
    write_text(&out.join("fit.log"), &log)?;
    info!("wrote model to {}", out.display());
    Ok(FitOutput { model, selection })
}

/// Design for a stored model: columns matched by header, intercept
/// appended when the model has one.
pub fn design_for_model(model: &FittedModel, x_path: &Path) -> Result<DMatrix<f64>> {
    let mut table = read_matrix(x_path)?;
    if model.covariate_names.is_empty() {
        if table.x.ncols() != model.p() {
            return Err(CliError::format(x_path, format!("{} columns but the model has {}", table.x.ncols(), model.p())));
        }
        return Ok(table.x);
    }
    if model.covariate_names.iter().any(|n| n == INTERCEPT) && !table.names.iter().any(|n| n == INTERCEPT) {
        table = with_intercept(table);
    }
    align_columns(&table, &model.covariate_names, x_path)
}

/// Write `predictions.csv` with the linear predictor and the response-scale
/// prediction per row.
pub fn cmd_predict(cfg: &RunConfig) -> Result<ecpc_core::estimator::Prediction> {
    let model_path = cfg.model.as_deref().ok_or_else(|| CliError::Config("--model is required".into()))?;
    let x_path = cfg.x.as_deref().ok_or_else(|| CliError::Config("--x is required".into()))?;
    let text = std::fs::read_to_string(model_path).map_err(|e| CliError::io(model_path, e))?;
    let model = FittedModel::from_json(&text).map_err(|e| CliError::format(model_path, e.to_string()))?;
    let x = design_for_model(&model, x_path)?;
    let pred = predict(&model, &x)?;
    let rows: Vec<Vec<String>> = (0..x.nrows())
        .map(|i| vec![(i + 1).to_string(), fmt(pred.linear_predictor[i]), fmt(pred.response[i])])
        .collect();
    write_table(&cfg.out.join("predictions.csv"), &["row", "linear_predictor", "response"], &rows)?;
    Ok(pred)
}

/// Held-out metric of a coefficient vector: MSE, AUC or concordance.
pub fn holdout_metric(resp: &Response, x: &DMatrix<f64>, beta: &[f64]) -> Option<(&'static str, f64)> {
    let lp: Vec<f64> = (x * nalgebra::DVector::from_column_slice(beta)).iter().copied().collect();
    match resp {
        Response::Gaussian { y, .. } => Some(("mse", mse(&lp, y))),
        Response::Binomial { y } => auc(&lp, y).map(|a| ("auc", a)),
        Response::Cox { time, status } => concordance(time, status, &lp).map(|c| ("c_index", c)),
    }
}

fn subset(t: &Training, rows: &[usize]) -> (DMatrix<f64>, Response) {
    (select_rows(&t.x, rows), t.resp.subset(rows))
}

/// Per-fold fits on the training part and metrics on the held-out part;
/// writes `cv_metrics.csv`.
pub fn cmd_cv(cfg: &RunConfig) -> Result<Vec<MetricsRow>> {
    let seed = cfg.seed()?;
    let t = load_training(cfg)?;
    let spec = cfg.selection()?;
    let folds = stratified_folds(&t.resp.strata(), cfg.folds, seed);
    let per_fold: Vec<Vec<MetricsRow>> = (0..cfg.folds)
        .into_par_iter()
        .map(|f| -> Result<Vec<MetricsRow>> {
            let test: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] == f).collect();
            let train: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] != f).collect();
            let (xtr, rtr) = subset(&t, &train);
            let (xte, rte) = subset(&t, &test);
            let opts = options(cfg, seed.wrapping_add(f as u64));
            let undefined = || {
                CliError::Config(format!("fold {} has no usable held-out pairs (single class or no events)", f + 1))
            };
            let model = fit_ecpc(&xtr, &rtr, &t.sources, &t.unpenalized, &opts)?;
            let (_, _, ridge) = fit_ordinary_ridge(&xtr, &rtr, &t.unpenalized, &opts.global, &opts.fit)?;
            let mut rows = Vec::new();
            let (metric, v) = holdout_metric(&rte, &xte, &model.beta).ok_or_else(undefined)?;
            let dense = model.p() - model.diagnostics.excluded.len();
            rows.push(MetricsRow { method: "ecpc".into(), id: f + 1, metric: metric.into(), value: v, selected: Some(dense) });
            let (_, v) = holdout_metric(&rte, &xte, &ridge.beta).ok_or_else(undefined)?;
            rows.push(MetricsRow { method: "ordinary_ridge".into(), id: f + 1, metric: metric.into(), value: v, selected: Some(model.p()) });
            if let Some(spec) = &spec {
                let sel = run_selection(spec, &model, &xtr, &rtr)?;
                let (_, v) = holdout_metric(&rte, &xte, &sel.beta).ok_or_else(undefined)?;
                rows.push(MetricsRow {
                    method: "ecpc_selected".into(),
                    id: f + 1,
                    metric: metric.into(),
                    value: v,
                    selected: Some(sel.selected.len()),
                });
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<MetricsRow> = per_fold.into_iter().flatten().collect();
    write_metrics(&cfg.out.join("cv_metrics.csv"), &rows)?;
    Ok(rows)
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.id.to_string(),
                r.metric.clone(),
                fmt(r.value),
                r.selected.map(|s| s.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    write_table(path, &["method", "id", "metric", "value", "selected"], &table)
}

pub struct SimulateOutput {
    pub rows: Vec<SimRow>,
    pub summary: Vec<SummaryRow>,
}

/// Writes `simulate_mse.csv` (one row per replicate, co-data type, group
/// count and method), `simulate_summary.csv` and optionally `simulate.gp`.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulateOutput> {
    let seed = cfg.seed()?;
    let rows = run_study(&cfg.simulate, seed, cfg.splits.max(1))?;
    let summary = summarise(&rows);
    let out = &cfg.out;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.replicate.to_string(), r.codata.into(), r.groups.to_string(), r.method.into(), fmt(r.mse)])
        .collect();
    write_table(&out.join("simulate_mse.csv"), &["replicate", "codata", "groups", "method", "mse"], &table)?;
    let stable: Vec<Vec<String>> = summary
        .iter()
        .map(|s| vec![s.codata.into(), s.groups.to_string(), s.method.into(), fmt(s.mean), fmt(s.q25), fmt(s.q75)])
        .collect();
    write_table(&out.join("simulate_summary.csv"), &["codata", "groups", "method", "mean_mse", "q25", "q75"], &stable)?;
    if cfg.plot {
        write_text(&out.join("simulate.gp"), &gnuplot_script())?;
    }
    Ok(SimulateOutput { rows, summary })
}

fn gnuplot_script() -> String {
    let mut s = String::from("set datafile separator ','\nset key autotitle columnhead\nset xlabel 'number of groups'\nset ylabel 'test MSE'\n");
    s.push_str("set terminal pngcairo size 1000,450\nset output 'simulate.png'\nset multiplot layout 1,2\n");
    for codata in ["random", "informative"] {
        s.push_str(&format!("set title '{codata} co-data'\nplot "));
        let parts: Vec<String> = crate::simulate::METHODS
            .iter()
            .map(|m| {
                format!(
                    "'simulate_summary.csv' using (strcol(1) eq '{codata}' && strcol(3) eq '{m}' ? $2 : 1/0):4 with linespoints title '{m}'"
                )
            })
            .collect();
        s.push_str(&parts.join(", \\\n     "));
        s.push('\n');
    }
    s.push_str("unset multiplot\n");
    s
}

/// Stratified subsample of `fraction` of every stratum.
pub fn stratified_subsample(strata: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels: std::collections::BTreeSet<usize> = strata.iter().copied().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for s in levels {
        let mut idx: Vec<usize> = (0..strata.len()).filter(|&i| strata[i] == s).collect();
        idx.shuffle(&mut rng);
        let k = (fraction * idx.len() as f64).round() as usize;
        if k == 0 || k == idx.len() {
            return Err(CliError::Config(format!(
                "stratum with {} samples is too small to split at fraction {fraction}",
                idx.len()
            )));
        }
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub struct StabilityOutput {
    pub selections: Vec<Vec<usize>>,
    pub metrics: Vec<MetricsRow>,
    /// `(a, b, overlap)` for every pair of subsamples `a < b`.
    pub overlaps: Vec<(usize, usize, usize)>,
    /// Expected overlap `s²/p` of two random selections of size `s`.
    pub expected_random: f64,
}

/// Fit and select on stratified subsamples; writes
/// `stability_subsamples.csv`, `stability_selected.csv` and
/// `stability_overlap.csv`.
pub fn cmd_stability(cfg: &RunConfig) -> Result<StabilityOutput> {
    let seed = cfg.seed()?;
    let spec = cfg.selection()?.ok_or_else(|| CliError::Config("stability analysis needs --select".into()))?;
    let t = load_training(cfg)?;
    let st = &cfg.stability;
    if st.subsamples == 0 {
        return Err(CliError::Config("at least one subsample is needed".into()));
    }
    let strata = t.resp.strata();
    let results: Vec<(Vec<usize>, MetricsRow)> = (0..st.subsamples)
        .into_par_iter()
        .map(|s| -> Result<(Vec<usize>, MetricsRow)> {
            let sseed = if st.same_seed { seed } else { seed.wrapping_add(s as u64) };
            let (train, test) = stratified_subsample(&strata, st.fraction, sseed)?;
            let (xtr, rtr) = subset(&t, &train);
            let (xte, rte) = subset(&t, &test);
            let model = fit_ecpc(&xtr, &rtr, &t.sources, &t.unpenalized, &options(cfg, sseed))?;
            let sel = run_selection(&spec, &model, &xtr, &rtr)?;
            let (metric, value) = holdout_metric(&rte, &xte, &sel.beta).unwrap_or(("undefined", f64::NAN));
            let row = MetricsRow { method: "ecpc_selected".into(), id: s + 1, metric: metric.into(), value, selected: Some(sel.selected.len()) };
            Ok((sel.selected, row))
        })
        .collect::<Result<_>>()?;
    let (selections, metrics): (Vec<Vec<usize>>, Vec<MetricsRow>) = results.into_iter().unzip();
    let mut overlaps = Vec::new();
    for a in 0..selections.len() {
        for b in a + 1..selections.len() {
            let o = selections[a].iter().filter(|k| selections[b].contains(k)).count();
            overlaps.push((a + 1, b + 1, o));
        }
    }
    let p_pen = t.unpenalized.iter().filter(|&&u| !u).count() as f64;
    let expected_random = (spec.count * spec.count) as f64 / p_pen;
    let out = &cfg.out;
    write_metrics(&out.join("stability_subsamples.csv"), &metrics)?;
    let sel_rows: Vec<Vec<String>> = selections
        .iter()
        .enumerate()
        .flat_map(|(s, sel)| sel.iter().map(move |&k| (s, k)))
        .map(|(s, k)| vec![(s + 1).to_string(), t.names[k].clone()])
        .collect();
    write_table(&out.join("stability_selected.csv"), &["subsample", "covariate"], &sel_rows)?;
    let ov_rows: Vec<Vec<String>> = overlaps
        .iter()
        .map(|&(a, b, o)| vec![a.to_string(), b.to_string(), o.to_string(), fmt(expected_random)])
        .collect();
    write_table(&out.join("stability_overlap.csv"), &["a", "b", "overlap", "expected_random"], &ov_rows)?;
    Ok(StabilityOutput { selections, metrics, overlaps, expected_random })
}

/// Response family of a loaded training set, for callers that branch on it.
pub fn family_of(t: &Training) -> Family {
    t.resp.family()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsample_is_stratified() {
        let strata: Vec<usize> = (0..30).map(|i| usize::from(i % 3 == 0)).collect();
        let (train, test) = stratified_subsample(&strata, 2.0 / 3.0, 4).unwrap();
        assert_eq!(train.len() + test.len(), 30);
        assert_eq!(train.iter().filter(|&&i| strata[i] == 1).count(), 7);
        assert!(stratified_subsample(&[0, 1], 0.5, 1).is_err());
    }

    #[test]
    fn gnuplot_mentions_both_panels() {
        let s = gnuplot_script();
        assert!(s.contains("random co-data") && s.contains("informative co-data"));
    }
}
