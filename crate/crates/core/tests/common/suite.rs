//! Finite-difference checks of every differentiable op and of each
//! retrospective mechanism through the full model.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use scout_core::numerics::AttnShape;

use super::{gradcheck, project, random, rng};

pub const INSTANCES: u64 = 20;

/// Worst relative error and instance count per checked name.
#[derive(Debug, Default)]
pub struct Checks {
    pub results: BTreeMap<String, (usize, f64)>,
}

impl Checks {
    fn record(&mut self, name: &str, err: f64) {
        let e = self.results.entry(name.to_string()).or_insert((0, 0.0));
        e.0 += 1;
        e.1 = e.1.max(err);
    }
}

pub fn op_checks() -> Checks {
    let mut out = Checks::default();
    elementwise_and_linear_ops(&mut out);
    layer_norm(&mut out);
    causal_attention(&mut out);
    loss_primitives(&mut out);
    out
}

pub fn mechanism_checks() -> Checks {
    let mut out = Checks::default();
    every_mechanism_through_the_full_model(&mut out);
    out
}

fn elementwise_and_linear_ops(out: &mut Checks) {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
        let a = random(&mut r, &[m, k], 1.0);
        let b = random(&mut r, &[k, n], 1.0);
        let c = random(&mut r, &[m, k], 1.0);
        let bias = random(&mut r, &[n], 1.0);
        let proj = random(&mut r, &[m, n], 1.0);
        let projk = random(&mut r, &[m, k], 1.0);
        let proj2 = random(&mut r, &[m, 2 * k], 1.0);
        out.record("matmul", gradcheck(&[a.clone(), b.clone()], |_, v| project(v[0].matmul(&v[1]).unwrap(), &proj)));
        out.record("linear", gradcheck(&[a.clone(), b.clone(), bias.clone()], |_, v| {
            project(v[0].linear(&v[1], &v[2]).unwrap(), &proj)
        }));
        out.record("add/sub/mul", gradcheck(&[a.clone(), c.clone()], |_, v| {
            let s = v[0].add(&v[1]).unwrap().mul(&v[0].sub(&v[1]).unwrap()).unwrap();
            project(s, &projk)
        }));
        out.record("scale/add_scalar", gradcheck(std::slice::from_ref(&a), |_, v| project(v[0].scale(-1.7).add_scalar(0.3), &projk)));
        out.record("sigmoid", gradcheck(std::slice::from_ref(&a), |_, v| project(v[0].scale(3.0).sigmoid(), &projk)));
        out.record("gelu", gradcheck(std::slice::from_ref(&a), |_, v| project(v[0].scale(3.0).gelu(), &projk)));
        out.record("sum", gradcheck(std::slice::from_ref(&a), |_, v| v[0].mul(&v[0]).unwrap().sum()));
        out.record("concat_cols", gradcheck(&[a.clone(), c.clone()], |_, v| project(v[0].concat_cols(&v[1]).unwrap(), &proj2)));
        let idx: Vec<usize> = (0..m + 2).map(|_| r.random_range(0..m)).collect();
        let projg = random(&mut r, &[m + 2, k], 1.0);
        out.record("gather_rows", gradcheck(std::slice::from_ref(&a), |_, v| project(v[0].gather_rows(&idx).unwrap(), &projg)));
    }
}

fn layer_norm(out: &mut Checks) {
    for seed in 0..INSTANCES {
        let mut r = rng(100 + seed);
        let (m, d) = (r.random_range(1..5), r.random_range(2..7));
        let x = random(&mut r, &[m, d], 2.0);
        let gamma = random(&mut r, &[d], 1.5);
        let beta = random(&mut r, &[d], 1.0);
        let proj = random(&mut r, &[m, d], 1.0);
        out.record("layer_norm", gradcheck(&[x, gamma, beta], |_, v| {
            project(v[0].layer_norm(&v[1], &v[2]).unwrap(), &proj)
        }));
    }
}

fn causal_attention(out: &mut Checks) {
    for seed in 0..INSTANCES {
        let mut r = rng(200 + seed);
        let heads = r.random_range(1..3);
        let d = heads * r.random_range(1..4);
        let (batch, len) = (r.random_range(1..3), r.random_range(1..5));
        let shape = AttnShape { batch, seq_len: len, heads };
        let rows = batch * len;
        let q = random(&mut r, &[rows, d], 1.0);
        let k = random(&mut r, &[rows, d], 1.0);
        let v = random(&mut r, &[rows, d], 1.0);
        let proj = random(&mut r, &[rows, d], 1.0);
        out.record("attention", gradcheck(&[q, k, v], |_, x| {
            project(x[0].causal_attention(&x[1], &x[2], shape).unwrap(), &proj)
        }));
    }
}

fn loss_primitives(out: &mut Checks) {
    for seed in 0..INSTANCES {
        let mut r = rng(300 + seed);
        let (n, vocab) = (r.random_range(2..6), r.random_range(2..7));
        let logits = random(&mut r, &[n, vocab], 2.0);
        let rows: Vec<usize> = (0..n).filter(|_| r.random_bool(0.7)).chain([n - 1]).collect();
        let targets: Vec<usize> = rows.iter().map(|_| r.random_range(0..vocab)).collect();
        out.record("cross_entropy", gradcheck(std::slice::from_ref(&logits), |_, v| v[0].cross_entropy_rows(&rows, &targets).unwrap()));
        let q = scout_core::numerics::softmax(&random(&mut r, &[rows.len(), vocab], 3.0), 1).unwrap();
        let q = Arc::new(q.into_probs());
        out.record("kl", gradcheck(&[logits], |_, v| v[0].kl_rows(&rows, q.clone()).unwrap()));
    }
}

fn every_mechanism_through_the_full_model(out: &mut Checks) {
    use scout_core::model::{partition_model, FlowModel, ModelConfig, PartitionCase, TokenBatch};
    use scout_core::retrospective::MechanismKind;

    for kind in MechanismKind::ALL {
        for seed in 0..INSTANCES {
            let mut r = rng(400 + seed);
            let config = ModelConfig {
                vocab_size: 5,
                model_dim: 4,
                num_heads: 2,
                num_layers: 2 + (seed as usize % 2),
                max_seq_len: 3,
                num_iterations: 3,
                ffn_mult: 2,
                init_std: 0.02,
            };
            let case = if seed % 3 == 0 { PartitionCase::Case1 } else { PartitionCase::Case2 };
            let part = partition_model(&config, case).unwrap();
            let model = FlowModel::<f64>::new(config, part, kind, seed).unwrap();
            // Move every parameter off its initialization so zero-initialized
            // projections carry gradient too.
            let inputs: Vec<_> = model
                .params()
                .iter()
                .map(|p| random(&mut r, p.value.shape(), 0.5))
                .collect();
            let tokens: Vec<Vec<usize>> = (0..2).map(|_| (0..3).map(|_| r.random_range(0..5)).collect()).collect();
            let batch = TokenBatch::new(&tokens).unwrap();
            let targets: Vec<usize> = (0..6).map(|_| r.random_range(0..5)).collect();
            let err = gradcheck(&inputs, |_, p| {
                let (logits, _) = model.forward_flow_graph(p, &batch).unwrap();
                let rows: Vec<usize> = (0..6).collect();
                let mut loss = logits[0].cross_entropy_rows(&rows, &targets).unwrap();
                for l in &logits[1..] {
                    loss = loss.add(&l.cross_entropy_rows(&rows, &targets).unwrap()).unwrap();
                }
                loss
            });
            out.record(kind.name(), err);
        }
    }
}
