#![allow(dead_code)]

pub mod suite;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scout_core::numerics::{Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces any output to a scalar through a fixed random projection.
pub fn project<'g>(out: Var<'g, f64>, weights: &Tensor<f64>) -> Var<'g, f64> {
    let w = out.graph().constant(weights.clone());
    out.mul(&w).unwrap().sum()
}

/// Norm-wise relative error between analytic and central-difference
/// gradients of `f` at `inputs`.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
        f(&g, &vars).value().item()
    };
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|x| g.param(Arc::new(x.clone()))).collect();
    let loss = f(&g, &vars);
    let analytic = g.grad(loss, &vars).unwrap();

    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[i].data()[j];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    let denom = na.sqrt().max(nn.sqrt());
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}
