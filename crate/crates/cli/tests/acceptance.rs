//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,4,7` restricts the run to the listed criteria.
//! The training-backed criteria (5 and 6) share one mod-97 fixture per seed
//! and dominate the runtime.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use scout_cli::{Command, RunConfig, Runner};
use scout_core::eval::{early_stop_infer, EarlyStopPolicy, EvalReport, Split, TaskSpec, TrainingBatch};
use scout_core::model::{partition_model, Checkpoint, FlowModel, ModelConfig, PartitionCase};
use scout_core::numerics::{argmax, cross_entropy, kl_divergence, softmax, Tensor};
use scout_core::retrospective::MechanismKind;
use scout_core::teachers::{measure_kl_ladder, soft_target_table, truncate_renormalize, SoftTargetTable};
use scout_core::training::{make_plan, per_step_loss, total_loss, train, PlanMode, TrainConfig};

const SEEDS: [u64; 3] = [0, 1, 2];
const KL_PROMPTS: usize = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn tiny_config(layers: usize, t: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 9,
        model_dim: 16,
        num_heads: 2,
        num_layers: layers,
        max_seq_len: 4,
        num_iterations: t,
        ffn_mult: 2,
        init_std: 0.1,
    }
}

/// Recursive model whose retrospective weights are all perturbed away from
/// their initial values, so zero-initialized projections do not hide them.
fn perturbed(backbone: &FlowModel<f64>, case: PartitionCase, kind: MechanismKind, t: usize) -> FlowModel<f64> {
    let partition = partition_model(backbone.config(), case).unwrap();
    let mut model = FlowModel::from_backbone(backbone, partition, kind, t, 11).unwrap();
    let mut r = common::rng(kind as u64 + 100);
    let names: Vec<String> = model
        .params()
        .iter()
        .filter(|p| p.name.starts_with("retro."))
        .map(|p| p.name.clone())
        .collect();
    for name in names {
        let shape = model.params().get(&name).unwrap().shape().to_vec();
        model.params_mut().set(&name, common::random(&mut r, &shape, 0.3)).unwrap();
    }
    model
}

fn gradients() -> Outcome {
    let ops = common::suite::op_checks();
    let mechs = common::suite::mechanism_checks();
    let all: Vec<_> = ops.results.iter().chain(&mechs.results).collect();
    let worst = all.iter().map(|(_, (_, e))| *e).fold(0.0, f64::max);
    let fewest = all.iter().map(|(_, (n, _))| *n).min().unwrap_or(0);
    let bad: Vec<&str> = all
        .iter()
        .filter(|(_, (n, e))| *e > common::FD_TOL || (*n as u64) < common::suite::INSTANCES)
        .map(|(k, _)| k.as_str())
        .collect();
    let pass = bad.is_empty() && mechs.results.len() == MechanismKind::ALL.len();
    outcome(
        pass,
        format!(
            "{} ops, {} mechanisms, >= {fewest} instances each, worst rel err {worst:.2e}{}",
            ops.results.len(),
            mechs.results.len(),
            if bad.is_empty() { String::new() } else { format!(", failing: {}", bad.join(", ")) }
        ),
    )
}

fn first_iteration_invariance() -> Outcome {
    let backbone = FlowModel::<f64>::plain(tiny_config(3, 1), 3).unwrap();
    let x = [1, 4, 2, 7];
    let mut failures = Vec::new();
    let mut later_differ = true;
    for case in [PartitionCase::Case1, PartitionCase::Case2] {
        let outs: Vec<_> = MechanismKind::ALL
            .iter()
            .map(|&k| perturbed(&backbone, case, k, 3).forward_flow(&x).unwrap())
            .collect();
        for (k, o) in MechanismKind::ALL.iter().zip(&outs) {
            if bits(&o.per_step_logits[0]) != bits(&outs[0].per_step_logits[0]) {
                failures.push(format!("{case}/{k}"));
            }
        }
        // Sanity: the mechanisms do act from the second iteration on.
        later_differ &= bits(&outs[1].per_step_logits[1]) != bits(&outs[5].per_step_logits[1]);
    }
    outcome(
        failures.is_empty() && later_differ,
        if failures.is_empty() {
            "iteration-1 logits bitwise equal for all 6 mechanisms, both partitions".into()
        } else {
            format!("differs: {}", failures.join(", "))
        },
    )
}

/// Masked mean cross-entropy written out directly from the logits.
fn ce_oracle(logits: &Tensor<f64>, batch: &TrainingBatch) -> f64 {
    let rows = batch.masked_rows();
    let targets = batch.masked_targets();
    let mut sum = 0.0;
    for (&r, &y) in rows.iter().zip(&targets) {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        sum += lse - row[y];
    }
    sum / rows.len() as f64
}

fn plan_identities() -> Outcome {
    let task = TaskSpec::mod_add(7);
    let data = task.dataset(Split::Train, None).unwrap();
    let mut cfg = tiny_config(3, 1);
    cfg.vocab_size = task.vocab_size();
    cfg.max_seq_len = task.input_len();
    let backbone = FlowModel::<f64>::plain(cfg.clone(), 1).unwrap();
    let teacher = FlowModel::<f64>::plain(ModelConfig { model_dim: 24, ..cfg }, 2).unwrap();
    let table = soft_target_table(&teacher, &data, task.vocab_size()).unwrap();
    let soft: BTreeMap<usize, SoftTargetTable<f64>> = (0..3).map(|i| (i, table.clone())).collect();
    let opt = TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        steps: Some(100),
        ..TrainConfig::default()
    };
    let partition = partition_model(backbone.config(), PartitionCase::Case1).unwrap();
    let run = |mode| {
        let plan = make_plan(mode, 3, 3, 0.5).unwrap();
        let mut m = FlowModel::from_backbone(&backbone, partition.clone(), MechanismKind::Gate, 3, 4).unwrap();
        let log = train(&mut m, &plan, &data, &soft, &opt, 4).unwrap();
        (log.losses(), Checkpoint::new(m).checksum().unwrap())
    };
    let (scout, scout_ck) = run(PlanMode::Scout);
    let (eq, eq_ck) = run(PlanMode::RDistillEq);
    let traj_diff = scout.iter().zip(&eq).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let a_ok = scout.len() == 100 && eq.len() == 100 && traj_diff <= 1e-12 && scout_ck == eq_ck;

    // Loss decompositions on one batch of a recursive model.
    let model = perturbed(&backbone, PartitionCase::Case1, MechanismKind::ModInj, 3);
    let batch = TrainingBatch::from_examples(&data.examples[..16]).unwrap();
    let out = model.forward_flow_batch(&batch.inputs).unwrap();
    let rows = batch.masked_rows();
    let q = softmax(&teacher.forward_flow_batch(&batch.inputs).unwrap().per_step_logits[0], 1)
        .unwrap()
        .select_rows(&rows)
        .unwrap();
    let mut b_ok = true;
    let mut c_ok = true;
    let mut oracle_gap = 0.0f64;
    for logits in &out.per_step_logits {
        let p = softmax(logits, 1).unwrap();
        let kl = kl_divergence(&q, &p.select_rows(&rows).unwrap()).unwrap();
        let s = per_step_loss(&p, Some(&q), &batch, 0.0).unwrap();
        b_ok &= s.ce.is_none() && s.kl == Some(kl) && s.total.to_bits() == kl.to_bits();
        let ce = cross_entropy(&p, &batch.targets, Some(&batch.mask)).unwrap();
        oracle_gap = oracle_gap.max((ce - ce_oracle(logits, &batch)).abs());
    }
    let distill = make_plan(PlanMode::RDistillEq, 1, 3, 0.0).unwrap();
    let soft_q = vec![Some(q.clone()); 3];
    let tl = total_loss(&out, &distill, &batch, &soft_q).unwrap();
    b_ok &= tl.per_step.iter().all(|s| s.ce.is_none());
    let kl_sum: f64 = tl.per_step.iter().map(|s| s.kl.unwrap() / 3.0).sum();
    b_ok &= (tl.total - kl_sum).abs() <= 1e-15;

    let sft = make_plan(PlanMode::RSft, 0, 3, 0.5).unwrap();
    let tl = total_loss(&out, &sft, &batch, &[None, None, None]).unwrap();
    for (s, logits) in tl.per_step.iter().zip(&out.per_step_logits) {
        let ce = cross_entropy(&softmax(logits, 1).unwrap(), &batch.targets, Some(&batch.mask)).unwrap();
        c_ok &= s.kl.is_none() && s.ce == Some(ce) && s.total.to_bits() == ce.to_bits();
    }
    c_ok &= oracle_gap <= 1e-12;

    outcome(
        a_ok && b_ok && c_ok,
        format!(
            "(a) SCOUT vs EQ over {} steps: max |diff| {traj_diff:.1e}, checkpoints {}; (b) alpha=0 {}; (c) R-SFT {} (oracle gap {oracle_gap:.1e})",
            scout.len(),
            if scout_ck == eq_ck { "identical" } else { "differ" },
            if b_ok { "exact" } else { "not exact" },
            if c_ok { "exact" } else { "not exact" },
        ),
    )
}

fn vocab_reconciliation() -> Outcome {
    let mut r = common::rng(4);
    let mut worst_sum = 0.0f64;
    let mut worst_ratio = 0.0f64;
    let mut softmax_bitwise = true;
    for _ in 0..20 {
        let rows = r.random_range(1..6);
        let vocab = r.random_range(2..40);
        let keep = r.random_range(1..=vocab);
        let logits = common::random(&mut r, &[rows, vocab], 8.0);
        let d = truncate_renormalize(&logits, keep).unwrap();
        let full = softmax(&logits, 1).unwrap();
        for i in 0..rows {
            worst_sum = worst_sum.max((d.row(i).iter().sum::<f64>() - 1.0).abs());
            // Relative mass among kept ids matches the full distribution.
            let kept: f64 = full.row(i)[..keep].iter().sum();
            for j in 0..keep {
                let rel = (d.row(i)[j] - full.row(i)[j] / kept).abs() / d.row(i)[j];
                worst_ratio = worst_ratio.max(rel);
            }
        }
        softmax_bitwise &= bits(truncate_renormalize(&logits, vocab).unwrap().probs()) == bits(full.probs());
    }
    let big = common::random(&mut r, &[2, 152_064], 10.0);
    let d = truncate_renormalize(&big, 151_936).unwrap();
    let shape_ok = d.probs().shape() == [2, 151_936]
        && (0..2).all(|i| (d.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9)
        && d.probs().data().iter().all(|p| p.is_finite() && *p >= 0.0);
    let pass = worst_sum <= 1e-9 && worst_ratio <= 1e-9 && softmax_bitwise && shape_ok;
    outcome(
        pass,
        format!(
            "max |row sum - 1| {worst_sum:.1e}, proportionality {worst_ratio:.1e}, equal vocab {}, 152064 -> 151936 {}",
            if softmax_bitwise { "bitwise softmax" } else { "differs from softmax" },
            if shape_ok { "ok" } else { "invalid" }
        ),
    )
}

fn zero_init_pass_through() -> Outcome {
    let backbone = FlowModel::<f64>::plain(tiny_config(4, 1), 8).unwrap();
    let x = [3, 0, 8, 5];
    let reference = bits(&backbone.forward_flow(&x).unwrap().per_step_logits[0]);
    let mut ok = true;
    for case in [PartitionCase::Case1, PartitionCase::Case2] {
        let partition = partition_model(backbone.config(), case).unwrap();
        let model = FlowModel::from_backbone(&backbone, partition, MechanismKind::XAttn, 3, 21).unwrap();
        ok &= model
            .forward_flow(&x)
            .unwrap()
            .per_step_logits
            .iter()
            .all(|l| bits(l) == reference);
    }
    outcome(
        ok,
        if ok {
            "every iteration equals the backbone bitwise, both partitions"
        } else {
            "outputs differ from the backbone"
        },
    )
}

fn tiny_run_config(dir: &Path) -> RunConfig {
    RunConfig::parse(&format!(
        r#"
[model]
model_dim = 8
num_heads = 2
num_layers = 2
init_std = 0.1

[partition]
case = "case2"

[mechanism]
kind = "gate"
iterations = 3

[plan]
mode = "scout"

[optimizer]
lr = 1e-3
batch_size = 16
steps = 25

[data]
eval_limit = 10

[data.task]
name = "mod7"
kind = {{ type = "mod_add", modulus = 7 }}

[seed]
root = 13

[[ladder.teachers]]
capacity_rank = 1
model_dim = 8
num_layers = 1
num_heads = 2

[[ladder.teachers]]
capacity_rank = 2
model_dim = 8
num_layers = 2
num_heads = 2

[[ladder.teachers]]
capacity_rank = 3
model_dim = 16
num_layers = 2
num_heads = 2

[paths]
ladder = "{}"
"#,
        dir.join("ladder").display()
    ))
    .unwrap()
}

fn run_all(dir: &Path) -> (String, String, Vec<f64>) {
    let cfg = tiny_run_config(dir.parent().unwrap());
    for cmd in [Command::Pretrain, Command::Train] {
        Runner::new(cfg.clone(), cmd, dir.into(), 1, None).unwrap().run(cmd).unwrap();
    }
    let read = |p: &str| std::fs::read(dir.join(p)).unwrap();
    let sha = |p: &str| scout_core::hash::sha256_hex(&read(p));
    let log = String::from_utf8(read("train/log.jsonl")).unwrap();
    let losses = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["total"].as_f64().unwrap())
        .collect();
    (sha("pretrain/backbone.ckpt"), sha("train/model.ckpt"), losses)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_run_config(tmp.path());
    Runner::new(cfg, Command::Ladder, tmp.path().join("shared"), 1, None)
        .unwrap()
        .run(Command::Ladder)
        .unwrap();
    let a = run_all(&tmp.path().join("a"));
    let b = run_all(&tmp.path().join("b"));
    let same_runs = a == b && a.2.len() == 25;

    let ck = Checkpoint::<f64>::load(&tmp.path().join("a/train/model.ckpt")).unwrap();
    let path = tmp.path().join("copy.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::<f64>::load(&path).unwrap();
    let task = TaskSpec::mod_add(7);
    let batch = TrainingBatch::from_examples(&task.dataset(Split::Dev, None).unwrap().examples).unwrap();
    let (x, y) = (
        ck.model.forward_flow_batch(&batch.inputs).unwrap(),
        back.model.forward_flow_batch(&batch.inputs).unwrap(),
    );
    let round_trip = x.per_step_logits.iter().zip(&y.per_step_logits).all(|(p, q)| bits(p) == bits(q))
        && back.checksum().unwrap() == ck.checksum().unwrap();
    outcome(
        same_runs && round_trip,
        format!(
            "repeat runs {}, save/load {}",
            if same_runs { "identical (losses and checkpoint checksums)" } else { "diverge" },
            if round_trip { "bitwise" } else { "not bitwise" }
        ),
    )
}

fn early_stop() -> Outcome {
    let backbone = FlowModel::<f64>::plain(tiny_config(3, 1), 5).unwrap();
    let t = 4;
    let model = perturbed(&backbone, PartitionCase::Case1, MechanismKind::CatProj, t);
    let single = FlowModel::from_backbone(&backbone, partition_model(backbone.config(), PartitionCase::Case1).unwrap(), MechanismKind::CatProj, 1, 0).unwrap();
    let mut r = common::rng(9);
    let (mut none_ok, mut dominance_ok, mut identity_ok) = (true, true, true);
    let thresholds = [1e-6, 1e-3, 0.05, 0.5, 1.0, 1.5, 2.0, 3.0];
    for _ in 0..20 {
        let len = r.random_range(1..=4);
        let prompt: Vec<usize> = (0..len).map(|_| r.random_range(0..9)).collect();
        let out = model.forward_flow(&prompt).unwrap();
        let dist = |i: usize| softmax(&out.per_step_logits[i].select_rows(&[len - 1]).unwrap(), 1).unwrap();

        let full = early_stop_infer(&model, &prompt, EarlyStopPolicy::None).unwrap();
        none_ok &= full.stop_iteration == t
            && bits(full.distribution.probs()) == bits(dist(t - 1).probs())
            && full.token == argmax(dist(t - 1).row(0));

        for policy in [
            |th| EarlyStopPolicy::Entropy { threshold: th },
            |th| EarlyStopPolicy::Consistency { threshold: th },
        ] {
            let stops: Vec<usize> = thresholds
                .iter()
                .map(|&th| early_stop_infer(&model, &prompt, policy(th)).unwrap().stop_iteration)
                .collect();
            dominance_ok &= stops.windows(2).all(|w| w[1] <= w[0]);
            // A stopped answer is the distribution of its own iteration.
            for &th in &thresholds {
                let o = early_stop_infer(&model, &prompt, policy(th)).unwrap();
                identity_ok &= bits(o.distribution.probs()) == bits(dist(o.stop_iteration - 1).probs());
            }
        }
        let ln_v = (9f64).ln() + 1.0;
        let e = early_stop_infer(&model, &prompt, EarlyStopPolicy::Entropy { threshold: ln_v }).unwrap();
        identity_ok &= e.stop_iteration == 1 && bits(e.distribution.probs()) == bits(dist(0).probs());
        let c = early_stop_infer(&model, &prompt, EarlyStopPolicy::Consistency { threshold: 1e9 }).unwrap();
        identity_ok &= c.stop_iteration == 2;
        let reference = early_stop_infer(&single, &prompt, EarlyStopPolicy::None).unwrap();
        for policy in [
            EarlyStopPolicy::Entropy { threshold: 1e-9 },
            EarlyStopPolicy::Entropy { threshold: 1e9 },
            EarlyStopPolicy::Consistency { threshold: 1e-9 },
        ] {
            identity_ok &= early_stop_infer(&single, &prompt, policy).unwrap() == reference;
        }
    }
    let state = |b| if b { "ok" } else { "FAILED" };
    outcome(
        none_ok && dominance_ok && identity_ok,
        format!(
            "none == full T {}, threshold dominance {}, identity cases {}",
            state(none_ok),
            state(dominance_ok),
            state(identity_ok)
        ),
    )
}

/// Mod-97 experiment artifacts of one seed.
struct SeedRun {
    kl: Vec<(usize, f64)>,
    scout: EvalReport,
    ladder_secs: f64,
    finetune_secs: f64,
}

fn config_file(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::load(&path).unwrap()
}

fn runner(cfg: &RunConfig, cmd: Command, out: &Path, seed: u64) -> Runner {
    Runner::new(cfg.clone(), cmd, out.into(), 1, Some(seed)).unwrap()
}

fn seed_run(out: &Path, seed: u64) -> SeedRun {
    let pre = config_file("mod97_pretrain.toml");
    let start = Instant::now();
    for cmd in [Command::Pretrain, Command::Ladder] {
        runner(&pre, cmd, out, seed).run(cmd).unwrap();
    }
    let backbone = Checkpoint::<f64>::load(&out.join("pretrain/backbone.ckpt")).unwrap().model;
    let ladder = scout_cli::load_ladder(&out.join("ladder")).unwrap();
    let data = pre.data().unwrap();
    let prompts = data.task.dataset(Split::Dev, Some(KL_PROMPTS)).unwrap();
    let kl = measure_kl_ladder(&backbone, &ladder, &prompts.examples).unwrap();
    let ladder_secs = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let fine = config_file("mod97_finetune.toml");
    runner(&fine, Command::Train, out, seed).run(Command::Train).unwrap();
    let scout: EvalReport = serde_json::from_slice(&std::fs::read(out.join("train/report.json")).unwrap()).unwrap();
    SeedRun {
        kl,
        scout,
        ladder_secs,
        finetune_secs: start.elapsed().as_secs_f64(),
    }
}

struct Experiment {
    runs: Vec<SeedRun>,
    ablation: Vec<(MechanismKind, Vec<f64>)>,
    ablation_secs: f64,
    summary: String,
}

fn experiment(root: &Path) -> Experiment {
    let runs: Vec<SeedRun> = SEEDS
        .iter()
        .map(|&s| {
            let r = seed_run(&root.join(format!("seed{s}")), s);
            eprintln!(
                "  seed {s}: KL {:?}, SCOUT dev accuracy {:?} ({:.0}s + {:.0}s)",
                r.kl, r.scout.per_iteration_accuracy, r.ladder_secs, r.finetune_secs
            );
            r
        })
        .collect();

    // Ablation matrix on the first seed's backbone, all seeds as cell seeds.
    let start = Instant::now();
    let out = root.join(format!("seed{}", SEEDS[0]));
    let mut cfg = config_file("mod97_finetune.toml");
    if let Some(a) = cfg.ablate.as_mut() {
        a.seeds = SEEDS.to_vec();
    }
    let manifest = runner(&cfg, Command::Ablate, &out, SEEDS[0]).run(Command::Ablate).unwrap();
    assert!(manifest.failures.is_empty(), "ablation cells failed: {:?}", manifest.failures);
    let mut per_mech: BTreeMap<MechanismKind, Vec<Vec<f64>>> = BTreeMap::new();
    for cell in runner(&cfg, Command::Ablate, &out, SEEDS[0]).cells().unwrap() {
        let path = out.join("ablate/cells").join(cell.id()).join("report.json");
        let report: EvalReport = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
        per_mech.entry(cell.mechanism).or_default().push(report.per_iteration_accuracy);
    }
    let ablation = per_mech
        .into_iter()
        .map(|(k, runs)| {
            let t = runs[0].len();
            let mean = (0..t).map(|i| runs.iter().map(|r| r[i]).sum::<f64>() / runs.len() as f64).collect();
            (k, mean)
        })
        .collect();
    let summary = std::fs::read_to_string(out.join("ablate/summary.csv")).unwrap();
    Experiment {
        runs,
        ablation,
        ablation_secs: start.elapsed().as_secs_f64(),
        summary,
    }
}

fn kl_trend(e: &Experiment) -> Outcome {
    let monotone: Vec<bool> = e
        .runs
        .iter()
        .map(|r| r.kl.windows(2).all(|w| w[1].1 >= w[0].1))
        .collect();
    let count = monotone.iter().filter(|&&m| m).count();
    let secs: f64 = e.runs.iter().map(|r| r.ladder_secs).sum();
    let kls: Vec<String> = e
        .runs
        .iter()
        .map(|r| r.kl.iter().map(|(_, v)| format!("{v:.3}")).collect::<Vec<_>>().join("/"))
        .collect();
    outcome(
        count * 2 > e.runs.len() && secs < 30.0 * 60.0,
        format!(
            "nondecreasing in {count}/{} seeds (KL per seed {}), {:.1} min",
            e.runs.len(),
            kls.join(", "),
            secs / 60.0
        ),
    )
}

fn refinement_trend(e: &Experiment) -> Outcome {
    let n = e.runs.len() as f64;
    let first = e.runs.iter().map(|r| r.scout.per_iteration_accuracy[0]).sum::<f64>() / n;
    let last = e.runs.iter().map(|r| *r.scout.per_iteration_accuracy.last().unwrap()).sum::<f64>() / n;
    let xattn = &e.ablation.iter().find(|(k, _)| *k == MechanismKind::XAttn).unwrap().1;
    let drift = 100.0 * (xattn[xattn.len() - 1] - xattn[0]).abs();
    let secs = e.runs.iter().map(|r| r.finetune_secs).sum::<f64>() + e.ablation_secs;
    let total = secs + e.runs.iter().map(|r| r.ladder_secs).sum::<f64>();
    eprintln!("  ablation summary (R-SFT):\n{}", e.summary.trim_end().replace('\n', "\n    "));
    let rows: Vec<String> = e
        .ablation
        .iter()
        .map(|(k, acc)| {
            format!(
                "{k} {}",
                acc.iter().map(|a| format!("{:.1}", 100.0 * a)).collect::<Vec<_>>().join("/")
            )
        })
        .collect();
    outcome(
        drift <= 5.0 && total < 3600.0,
        format!(
            "hard gate: XAttn |acc3 - acc1| = {drift:.2} pts (<= 5); soft: SCOUT mean dev acc it1 {:.1}% -> it{} {:.1}% ({}); R-SFT ablation {}; {:.1} min",
            100.0 * first,
            e.runs[0].scout.per_iteration_accuracy.len(),
            100.0 * last,
            if last >= first { "holds" } else { "does not hold" },
            rows.join(", "),
            total / 60.0
        ),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));

    let mut lines: Vec<(usize, Outcome, f64)> = Vec::new();
    let mut run = |n: usize, f: &dyn Fn() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        println!(
            "criterion {n}: {} - {} [{secs:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        lines.push((n, o, secs));
    };

    run(1, &gradients);
    run(2, &first_iteration_invariance);
    run(3, &plan_identities);
    run(4, &vocab_reconciliation);
    run(7, &zero_init_pass_through);
    run(8, &determinism);
    run(9, &early_stop);
    if wanted(5) || wanted(6) {
        let tmp = tempfile::tempdir().unwrap();
        let exp = catch_unwind(AssertUnwindSafe(|| experiment(tmp.path())));
        match exp {
            Ok(e) => {
                run(5, &|| kl_trend(&e));
                run(6, &|| refinement_trend(&e));
            }
            Err(_) => {
                run(5, &|| outcome(false, "mod-97 experiment failed"));
                run(6, &|| outcome(false, "mod-97 experiment failed"));
            }
        }
    }

    lines.sort_by_key(|(n, _, _)| *n);
    let failed: Vec<String> = lines.iter().filter(|(_, o, _)| !o.pass).map(|(n, _, _)| n.to_string()).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        lines.len() - failed.len(),
        lines.len(),
        if failed.is_empty() { String::new() } else { format!(" (failed: {})", failed.join(", ")) }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
