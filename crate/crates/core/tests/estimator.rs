use ecpc_core::codata::build_hierarchy_from_continuous;
use ecpc_core::estimator::{predict_survival, FittedModel};
use ecpc_core::selection::{refit_selected, select_credible, select_dss_count, select_l1, RefitMode};
use ecpc_core::{fit_ecpc, predict, CoDataSource, EcpcOptions, Grouping, HierarchyOptions, HyperKind, Response};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

struct Sim {
    x: DMatrix<f64>,
    beta: Vec<f64>,
    lp: Vec<f64>,
}

/// Two blocks of covariates: the first carries all signal.
fn simulate(n: usize, p: usize, seed: u64) -> Sim {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: DMatrix<f64> = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
    let strong = Normal::new(0.0, 0.6).unwrap();
    let beta: Vec<f64> = (0..p).map(|k| if k < p / 4 { strong.sample(&mut rng) } else { 0.0 }).collect();
    let lp: Vec<f64> = (&x * DVector::from_column_slice(&beta)).iter().copied().collect();
    Sim { x, beta, lp }
}

fn informative(p: usize) -> Grouping {
    Grouping::new("informative", p, vec![(0..p / 4).collect(), (p / 4..p).collect()]).unwrap()
}

fn random_groups(p: usize, g: usize, seed: u64) -> Grouping {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..p).collect();
    idx.shuffle(&mut rng);
    Grouping::new("random", p, (0..g).map(|i| idx[i * p / g..(i + 1) * p / g].to_vec()).collect()).unwrap()
}

fn fast_opts() -> EcpcOptions {
    let mut o = EcpcOptions::default();
    o.global.folds = 5;
    o.global.lambda_grid = ecpc_core::linalg::logspace(1e-2, 1e4, 20);
    o.tuning.n_splits = 4;
    o
}

#[test]
fn gaussian_informative_weights_and_determinism() {
    let s = simulate(60, 80, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y: Vec<f64> = s.lp.iter().map(|v| v + { let e: f64 = StandardNormal.sample(&mut rng); e }).collect();
    let resp = Response::gaussian(y, None).unwrap();
    let sources = [CoDataSource::new(informative(80), HyperKind::Ridge), CoDataSource::new(random_groups(80, 4, 3), HyperKind::Ridge)];
    let opts = fast_opts();
    let a = fit_ecpc(&s.x, &resp, &sources, &vec![false; 80], &opts).unwrap();
    let b = fit_ecpc(&s.x, &resp, &sources, &vec![false; 80], &opts).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let g = &a.groupings[0].gamma;
    assert!(g[0] > g[1], "signal group weight {} vs noise {}", g[0], g[1]);
    assert!(a.w.iter().all(|&w| w >= 0.0));
    assert!(a.w[0] > a.w[1]);
    let back = FittedModel::from_json(&a.to_json().unwrap()).unwrap();
    assert_eq!(back, a);
}

#[test]
fn binomial_with_intercept_and_hierarchy() {
    let (n, p) = (80, 60);
    let s = simulate(n, p, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut x = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { s.x[(i, j - 1)] });
    x.column_mut(0).fill(1.0);
    let y: Vec<f64> = s.lp.iter().map(|&e| if rng.random::<f64>() < 1.0 / (1.0 + (-e).exp()) { 1.0 } else { 0.0 }).collect();
    let resp = Response::binomial(y).unwrap();
    let mut unpen = vec![false; p + 1];
    unpen[0] = true;
    // co-data: noisy |β|, small values mean relevant
    let codata: Vec<f64> = s.beta.iter().map(|b| -b.abs() + 0.05 * rng.random::<f64>()).collect();
    let (grouping, _) = build_hierarchy_from_continuous("rank", &codata, &HierarchyOptions::new(8)).unwrap();
    let sources = [CoDataSource::new(grouping.clone(), HyperKind::HierLassoThenRidge)];
    let model = fit_ecpc(&x, &resp, &sources, &unpen, &fast_opts()).unwrap();
    let tree = grouping.tree.as_ref().unwrap();
    let node_sel: Vec<bool> = (0..tree.len()).map(|v| model.groupings[0].selected[tree.node_group[v]]).collect();
    assert!(tree.is_ancestor_closed(&node_sel));
    assert_eq!(model.tau_local[0], 0.0);
    assert!(model.beta[0].is_finite());
    let pr = predict(&model, &x).unwrap();
    assert!(pr.response.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn cox_model_has_monotone_baseline() {
    let (n, p) = (70, 40);
    let s = simulate(n, p, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let time: Vec<f64> = s.lp.iter().map(|&e| -rng.random::<f64>().ln() / e.exp()).collect();
    let status: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.8 { 1.0 } else { 0.0 }).collect();
    let resp = Response::cox(time, status).unwrap();
    let sources = [CoDataSource::new(informative(p), HyperKind::Ridge)];
    let model = fit_ecpc(&s.x, &resp, &sources, &vec![false; p], &fast_opts()).unwrap();
    let base = model.baseline.as_ref().unwrap();
    assert!(base.cumhaz.windows(2).all(|w| w[0] <= w[1]));
    let lp = predict(&model, &s.x).unwrap().linear_predictor;
    let surv = predict_survival(&model, &lp, base.times[n / 2]).unwrap();
    assert!(surv.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn sparse_hypershrinkage_excludes_unselected_groups() {
    let s = simulate(60, 80, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y: Vec<f64> = s.lp.iter().map(|v| v + { let e: f64 = StandardNormal.sample(&mut rng); 0.5 * e }).collect();
    let resp = Response::gaussian(y, None).unwrap();
    let sources = [CoDataSource::new(informative(80), HyperKind::Lasso)];
    let model = fit_ecpc(&s.x, &resp, &sources, &vec![false; 80], &fast_opts()).unwrap();
    let gf = &model.groupings[0];
    for (g, grp) in gf.grouping.groups.iter().enumerate() {
        if gf.gamma[g] == 0.0 {
            for &k in grp {
                assert_eq!(model.beta[k], 0.0);
            }
        }
    }
}

#[test]
fn selection_methods_hit_counts_and_dense_refit_reproduces_fit() {
    let s = simulate(50, 60, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let y: Vec<f64> = s.lp.iter().map(|v| v + { let e: f64 = StandardNormal.sample(&mut rng); e }).collect();
    let resp = Response::gaussian(y, None).unwrap();
    let model = fit_ecpc(&s.x, &resp, &[CoDataSource::new(informative(60), HyperKind::Ridge)], &vec![false; 60], &fast_opts()).unwrap();
    for count in [3, 10, 20] {
        assert_eq!(select_l1(&model, &s.x, &resp, count, RefitMode::Dense).unwrap().selected.len(), count);
        assert_eq!(select_credible(&model, &s.x, &resp, count, RefitMode::Recalibrated).unwrap().selected.len(), count);
        assert_eq!(select_dss_count(&model, &s.x, &resp, count, RefitMode::Dense).unwrap().selected.len(), count);
    }
    let all: Vec<usize> = (0..60).collect();
    let dense = refit_selected(&model, &s.x, &resp, &all, RefitMode::Dense).unwrap();
    for k in 0..60 {
        assert!((dense[k] - model.beta[k]).abs() < 1e-8);
    }
}
