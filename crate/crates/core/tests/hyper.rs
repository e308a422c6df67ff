use ecpc_core::codata::HierTree;
use ecpc_core::hypershrinkage::{
    estimate_hyperlambda, hierarchical_lasso_latent, lasso_lambda_max, solve_hierarchical_lasso, solve_lasso_hyper,
    solve_ridge_hyper, HyperTuning,
};
use ecpc_core::{Grouping, HyperKind, MomentSystem};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_system(rows: usize, g: usize, seed: u64) -> MomentSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(rows, g, |_, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v.abs() + 0.1
    });
    let b = DVector::from_fn(rows, |_, _| StandardNormal.sample(&mut rng));
    MomentSystem { a, b, group_labels: (0..g).map(|i| format!("G{i}")).collect(), rows: (0..rows).collect() }
}

fn seven_node_tree() -> HierTree {
    HierTree {
        node_group: (0..7).collect(),
        parent: vec![None, Some(0), Some(0), Some(1), Some(1), Some(2), Some(2)],
    }
}

fn path(tree: &HierTree, v: usize) -> Vec<usize> {
    let mut out = vec![v];
    let mut cur = v;
    while let Some(p) = tree.parent[cur] {
        out.push(p);
        cur = p;
    }
    out
}

/// Solver for `argmin ‖r − Mξ‖² + λ‖ξ‖₂` with `M` fixed.
struct GroupProx {
    m: DMatrix<f64>,
    vecs: DMatrix<f64>,
    vals: DVector<f64>,
}

impl GroupProx {
    fn new(m: DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(m.transpose() * &m * 2.0);
        Self { m, vecs: eig.eigenvectors, vals: eig.eigenvalues }
    }

    fn solve(&self, r: &DVector<f64>, lambda: f64) -> DVector<f64> {
        let g = self.m.transpose() * r * 2.0;
        if lambda > 0.0 && g.norm() <= lambda {
            return DVector::zeros(self.m.ncols());
        }
        let c = self.vecs.transpose() * &g;
        let at = |shift: f64| DVector::from_fn(c.len(), |i, _| c[i] / (self.vals[i] + shift));
        if lambda == 0.0 {
            return &self.vecs * at(0.0);
        }
        // ‖ξ(t)‖ = t with ξ(t) = (2MᵀM + λ/t)⁻¹ 2Mᵀr, by bisection on t
        let (mut lo, mut hi) = (0.0, 1.0);
        while at(lambda / hi).norm() > hi {
            hi *= 2.0;
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if at(lambda / mid).norm() > mid {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        &self.vecs * at(lambda / (0.5 * (lo + hi)))
    }
}

/// Block coordinate descent on the latent problem with only the blocks in
/// `support` allowed; returns the objective.
fn restricted_objective(sys: &MomentSystem, tree: &HierTree, support: &[usize], lambda: f64) -> f64 {
    let paths: Vec<Vec<usize>> = support.iter().map(|&v| path(tree, v)).collect();
    let blocks: Vec<GroupProx> = paths
        .iter()
        .map(|p| GroupProx::new(DMatrix::from_fn(sys.a.nrows(), p.len(), |i, j| sys.a[(i, p[j])])))
        .collect();
    let lams: Vec<f64> = support.iter().map(|&v| if tree.parent[v].is_some() { lambda } else { 0.0 }).collect();
    let mut xi: Vec<DVector<f64>> = paths.iter().map(|p| DVector::zeros(p.len())).collect();
    let mut fitted = DVector::zeros(sys.a.nrows());
    let objective = |xi: &[DVector<f64>], fitted: &DVector<f64>| {
        let pen: f64 = xi.iter().zip(&lams).map(|(x, l)| l * x.norm()).sum();
        (fitted - &sys.b).norm_squared() + pen
    };
    let mut prev = objective(&xi, &fitted);
    for _ in 0..1_000_000 {
        for b in 0..paths.len() {
            let r = &sys.b - &fitted + &blocks[b].m * &xi[b];
            let new = blocks[b].solve(&r, lams[b]);
            fitted += &blocks[b].m * (&new - &xi[b]);
            xi[b] = new;
        }
        let cur = objective(&xi, &fitted);
        if prev - cur < 1e-13 * (1.0 + cur.abs()) {
            return cur;
        }
        prev = cur;
    }
    prev
}

#[test]
fn hierarchical_selection_matches_exhaustive_search() {
    let tree = seven_node_tree();
    for seed in 0..6 {
        let sys = random_system(7, 7, 100 + seed);
        let top = (sys.a.transpose() * &sys.b * 2.0).norm();
        for rel in [0.02, 0.1, 0.3] {
            let lambda = rel * top;
            let (_, ours) = hierarchical_lasso_latent(&sys, &tree, lambda).unwrap();
            let fit = solve_hierarchical_lasso(&sys, &tree, lambda, None).unwrap();
            assert!(tree.is_ancestor_closed(&fit.selected));
            let mut best = f64::INFINITY;
            for mask in 0u32..128 {
                let sel: Vec<bool> = (0..7).map(|v| mask >> v & 1 == 1).collect();
                if !sel[0] || !tree.is_ancestor_closed(&sel) {
                    continue;
                }
                let support: Vec<usize> = (0..7).filter(|&v| sel[v]).collect();
                let obj = restricted_objective(&sys, &tree, &support, lambda);
                assert!(obj >= ours - 1e-6, "support {support:?}: {obj} < {ours}");
                best = best.min(obj);
                if sel == fit.selected {
                    assert!((obj - ours).abs() < 1e-6, "selected support objective {obj} vs {ours}");
                }
            }
            assert!((best - ours).abs() < 1e-6, "exhaustive {best} vs {ours}");
        }
    }
}

#[test]
fn hierarchical_large_penalty_keeps_only_root() {
    let tree = seven_node_tree();
    let sys = random_system(7, 7, 3);
    let fit = solve_hierarchical_lasso(&sys, &tree, 1e8, None).unwrap();
    assert_eq!(fit.selected, vec![true, false, false, false, false, false, false]);
}

#[test]
fn ridge_and_lasso_limits() {
    let sys = random_system(9, 6, 4);
    let w = vec![2.0, 3.0, 1.0, 5.0, 4.0, 2.0];
    let ridge = solve_ridge_hyper(&sys, 1e10, &w).unwrap();
    assert!(ridge.gamma.iter().all(|g| (g - 1.0).abs() < 1e-4));
    let lm = lasso_lambda_max(&sys, &w);
    let none = solve_lasso_hyper(&sys, lm, &w, None).unwrap();
    assert!(none.selected.iter().all(|&s| !s));
    let some = solve_lasso_hyper(&sys, 0.9 * lm, &w, None).unwrap();
    assert!(some.selected.iter().any(|&s| s));
}

#[test]
fn hyperlambda_is_deterministic_and_on_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (p, g) = (60, 6);
    let rows = DMatrix::from_fn(p, g, |_, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v.abs() * 1e-3
    });
    let rhs = DVector::from_fn(p, |_, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v * 1e-3
    });
    let grouping = Grouping::new("g", p, (0..g).map(|i| (i * 10..(i + 1) * 10).collect()).collect()).unwrap();
    for kind in [HyperKind::Ridge, HyperKind::Lasso] {
        let a = estimate_hyperlambda(&rows, &rhs, &grouping, kind, &HyperTuning::default()).unwrap();
        let b = estimate_hyperlambda(&rows, &rhs, &grouping, kind, &HyperTuning::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.grid.iter().any(|&l| l == a.lambda));
        assert_eq!(a.grid.len(), a.rss.len());
    }
}
