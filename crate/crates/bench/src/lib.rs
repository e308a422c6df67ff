//! Shared inputs for the benchmarks.

use ecpc_core::codata::build_codata_matrix;
use ecpc_core::{CoDataMatrix, Grouping};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub struct Problem {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub beta: Vec<f64>,
    pub weights: Vec<f64>,
    pub precision: Vec<f64>,
    pub grouping: Grouping,
    pub z: CoDataMatrix,
}

/// Gaussian design with `g` contiguous equal groups and a unit-weight,
/// unit-precision ridge setting.
pub fn problem(n: usize, p: usize, g: usize, seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: DMatrix<f64> = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
    let beta: Vec<f64> = (0..p)
        .map(|_| {
            let b: f64 = StandardNormal.sample(&mut rng);
            0.3 * b
        })
        .collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let e: f64 = StandardNormal.sample(&mut rng);
            (0..p).map(|k| x[(i, k)] * beta[k]).sum::<f64>() + e
        })
        .collect();
    let groups: Vec<Vec<usize>> = (0..g).map(|i| (i * p / g..(i + 1) * p / g).collect()).collect();
    let grouping = Grouping::new("bench", p, groups).expect("contiguous partition");
    let z = build_codata_matrix(&grouping).expect("non-empty groups");
    Problem { x, y, beta, weights: vec![1.0; n], precision: vec![1.0; p], grouping, z }
}
