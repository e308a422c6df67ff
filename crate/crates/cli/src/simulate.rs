//! Linear-regression simulation study with random and informative co-data.

use ecpc_core::estimator::fit_ordinary_ridge;
use ecpc_core::{fit_ecpc, CoDataSource, EcpcOptions, Grouping, HyperKind, Response};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::SimulateConfig;
use crate::error::Result;
use crate::metrics::mse;

pub struct SimData {
    pub beta: Vec<f64>,
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub x_test: DMatrix<f64>,
    pub y_test: Vec<f64>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `β ~ N(0, τ²I)`, `X` i.i.d. standard normal, `y = Xβ + N(0, σ²I)`, with
/// an independent test set of size `n_test`.
pub fn draw(cfg: &SimulateConfig, seed: u64) -> SimData {
    let mut rng = rng_for(seed, 0);
    let prior = Normal::new(0.0, cfg.tau2.sqrt()).expect("finite prior variance");
    let noise = Normal::new(0.0, cfg.sigma2.sqrt()).expect("finite noise variance");
    let beta: Vec<f64> = (0..cfg.p).map(|_| prior.sample(&mut rng)).collect();
    let mut sample = |n: usize| {
        let x: DMatrix<f64> = DMatrix::from_fn(n, cfg.p, |_, _| StandardNormal.sample(&mut rng));
        let mean = &x * DVector::from_column_slice(&beta);
        let y: Vec<f64> = mean.iter().map(|m| m + noise.sample(&mut rng)).collect();
        (x, y)
    };
    let (x, y) = sample(cfg.n);
    let (x_test, y_test) = sample(cfg.n_test);
    SimData { beta, x, y, x_test, y_test }
}

/// Split `order` into `g` consecutive, near-equal groups.
fn chunks(order: &[usize], g: usize) -> Vec<Vec<usize>> {
    let p = order.len();
    (0..g).map(|i| order[i * p / g..(i + 1) * p / g].to_vec()).collect()
}

pub fn random_grouping(p: usize, g: usize, seed: u64) -> Grouping {
    let mut order: Vec<usize> = (0..p).collect();
    order.shuffle(&mut rng_for(seed, 1 + g as u64));
    Grouping::new(format!("random{g}"), p, chunks(&order, g)).expect("partition covers all covariates")
}

/// Groups ordered by `|β_k|`, smallest first.
pub fn informative_grouping(beta: &[f64], g: usize) -> Grouping {
    let mut order: Vec<usize> = (0..beta.len()).collect();
    order.sort_by(|&a, &b| beta[a].abs().total_cmp(&beta[b].abs()).then(a.cmp(&b)));
    Grouping::new(format!("informative{g}"), beta.len(), chunks(&order, g)).expect("partition covers all covariates")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimRow {
    pub replicate: usize,
    pub codata: &'static str,
    pub groups: usize,
    pub method: &'static str,
    pub mse: f64,
}

pub const METHODS: [&str; 3] = ["ecpc_hyper", "ecpc_no_hyper", "ordinary_ridge"];

fn test_mse(data: &SimData, beta: &[f64]) -> f64 {
    let pred: Vec<f64> = (&data.x_test * DVector::from_column_slice(beta)).iter().copied().collect();
    mse(&pred, &data.y_test)
}

/// All rows of one replicate: for each co-data type and group count, the
/// test MSE of ecpc with and without hypershrinkage and of ordinary ridge.
pub fn run_replicate(cfg: &SimulateConfig, replicate: usize, seed: u64, splits: usize) -> Result<Vec<SimRow>> {
    let rseed = seed.wrapping_add(replicate as u64);
    let data = draw(cfg, rseed);
    let resp = Response::gaussian(data.y.clone(), None)?;
    let unpen = vec![false; cfg.p];
    let mut opts = EcpcOptions::default();
    opts.global.seed = rseed;
    opts.tuning.seed = rseed;
    opts.tuning.n_splits = splits;
    let (_, _, ridge) = fit_ordinary_ridge(&data.x, &resp, &unpen, &opts.global, &opts.fit)?;
    let ridge_mse = test_mse(&data, &ridge.beta);
    let mut kinds = Vec::new();
    if cfg.random {
        kinds.push("random");
    }
    if cfg.informative {
        kinds.push("informative");
    }
    let mut rows = Vec::new();
    for &codata in &kinds {
        for &g in &cfg.groups {
            let grouping = if codata == "random" { random_grouping(cfg.p, g, rseed) } else { informative_grouping(&data.beta, g) };
            for (method, hyper) in [("ecpc_hyper", HyperKind::Ridge), ("ecpc_no_hyper", HyperKind::None)] {
                let model = fit_ecpc(&data.x, &resp, &[CoDataSource::new(grouping.clone(), hyper)], &unpen, &opts)?;
                rows.push(SimRow { replicate, codata, groups: g, method, mse: test_mse(&data, &model.beta) });
            }
            rows.push(SimRow { replicate, codata, groups: g, method: "ordinary_ridge", mse: ridge_mse });
        }
    }
    Ok(rows)
}

/// Replicates run in parallel; rows come back in replicate order.
pub fn run_study(cfg: &SimulateConfig, seed: u64, splits: usize) -> Result<Vec<SimRow>> {
    let per: Vec<Vec<SimRow>> = (0..cfg.replicates).into_par_iter().map(|r| run_replicate(cfg, r, seed, splits)).collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub codata: &'static str,
    pub groups: usize,
    pub method: &'static str,
    pub mean: f64,
    pub q25: f64,
    pub q75: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Mean and quartiles of the test MSE per co-data type, group count and method.
pub fn summarise(rows: &[SimRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(&'static str, usize, &'static str)> = Vec::new();
    for r in rows {
        let k = (r.codata, r.groups, r.method);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(codata, groups, method)| {
            let mut v: Vec<f64> =
                rows.iter().filter(|r| r.codata == codata && r.groups == groups && r.method == method).map(|r| r.mse).collect();
            v.sort_by(f64::total_cmp);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            SummaryRow { codata, groups, method, mean, q25: quantile(&v, 0.25), q75: quantile(&v, 0.75) }
        })
        .collect()
}

pub fn mean_mse(summary: &[SummaryRow], codata: &str, groups: usize, method: &str) -> Option<f64> {
    summary.iter().find(|s| s.codata == codata && s.groups == groups && s.method == method).map(|s| s.mean)
}
