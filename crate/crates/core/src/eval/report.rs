use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::task::{Dataset, Example, Split};
use crate::model::{FlowModel, TokenBatch};
use crate::numerics::argmax;
use crate::scalar::Scalar;

/// Exact-match accuracy of every iteration's greedy decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub split: Split,
    pub num_examples: usize,
    pub per_iteration_accuracy: Vec<f64>,
    #[serde(default)]
    pub baseline: Option<Baseline>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// Reference a report is compared against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub name: String,
    pub per_iteration_accuracy: Vec<f64>,
    pub deltas: Deltas,
}

/// Signed per-iteration and average differences `report - baseline`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub per_iteration: Vec<f64>,
    pub average: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Differences of two accuracy vectors. A single-iteration side is
/// broadcast against every iteration of the other.
pub fn accuracy_deltas(report: &[f64], baseline: &[f64]) -> Result<Deltas> {
    let (a, b) = (report.len(), baseline.len());
    if a == 0 || b == 0 || (a != b && a != 1 && b != 1) {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    let n = a.max(b);
    let at = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
    Ok(Deltas {
        per_iteration: (0..n).map(|i| at(report, i) - at(baseline, i)).collect(),
        average: mean(report) - mean(baseline),
    })
}

/// `report - baseline` on unrounded values; both must cover the same task
/// and split.
pub fn delta_vs_baseline(report: &EvalReport, baseline: &EvalReport) -> Result<Deltas> {
    if report.task != baseline.task || report.split != baseline.split {
        return Err(Error::InvalidInput(format!(
            "baseline covers {}/{}, report covers {}/{}",
            baseline.task, baseline.split, report.task, report.split
        )));
    }
    accuracy_deltas(&report.per_iteration_accuracy, &baseline.per_iteration_accuracy)
}

impl EvalReport {
    pub fn average_accuracy(&self) -> f64 {
        mean(&self.per_iteration_accuracy)
    }

    /// Attaches `baseline` (named `name`) and its deltas.
    pub fn with_baseline(mut self, name: &str, baseline: &EvalReport) -> Result<Self> {
        let deltas = delta_vs_baseline(&self, baseline)?;
        self.baseline = Some(Baseline {
            name: name.to_string(),
            per_iteration_accuracy: baseline.per_iteration_accuracy.clone(),
            deltas,
        });
        Ok(self)
    }

    /// Comma-separated table, one row per iteration plus an `avg` row.
    ///
    /// Columns: `task,split,iteration,accuracy`, followed by
    /// `baseline,baseline_accuracy,delta` when a baseline is attached.
    /// Accuracies are percentages rounded to two decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,split,iteration,accuracy");
        if self.baseline.is_some() {
            out.push_str(",baseline,baseline_accuracy,delta");
        }
        out.push('\n');
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        let n = self.per_iteration_accuracy.len();
        let base_at = |b: &Baseline, i: usize| {
            let v = &b.per_iteration_accuracy;
            if v.len() == 1 {
                v[0]
            } else {
                v[i]
            }
        };
        for i in 0..=n {
            let (label, acc) = if i < n {
                ((i + 1).to_string(), self.per_iteration_accuracy[i])
            } else {
                ("avg".to_string(), self.average_accuracy())
            };
            let _ = write!(out, "{},{},{},{}", self.task, self.split, label, pct(acc));
            if let Some(b) = &self.baseline {
                let (base, delta) = if i < n {
                    (base_at(b, i), b.deltas.per_iteration[i])
                } else {
                    (mean(&b.per_iteration_accuracy), b.deltas.average)
                };
                let _ = write!(out, ",{},{},{:+.2}", b.name, pct(base), 100.0 * delta);
            }
            out.push('\n');
        }
        out
    }
}

/// Greedy continuation of equal-length prompts using the logits of
/// iteration `t` (0-based) for every generated token.
pub fn greedy_decode<S: Scalar>(model: &FlowModel<S>, prompts: &[&[usize]], steps: usize, t: usize) -> Result<Vec<Vec<usize>>> {
    let mut seqs: Vec<Vec<usize>> = prompts.iter().map(|p| p.to_vec()).collect();
    for _ in 0..steps {
        let batch = TokenBatch::new(&seqs)?;
        let out = model.forward_flow_batch(&batch)?;
        let logits = out.per_step_logits.get(t).ok_or(Error::IndexOutOfRange {
            index: t,
            size: out.per_step_logits.len(),
        })?;
        let l = batch.seq_len();
        for (b, s) in seqs.iter_mut().enumerate() {
            s.push(argmax(logits.row(b * l + l - 1)));
        }
    }
    let start = prompts.first().map_or(0, |p| p.len());
    Ok(seqs.into_iter().map(|s| s[start..].to_vec()).collect())
}

fn correct_counts<S: Scalar>(model: &FlowModel<S>, examples: &[Example]) -> Result<Vec<usize>> {
    let t_max = model.num_iterations();
    let answer_len = examples[0].answer().len();
    let prompts: Vec<&[usize]> = examples.iter().map(|e| e.prompt()).collect();
    if answer_len == 1 {
        // One forward pass scores every iteration at once.
        let batch = TokenBatch::new(&prompts)?;
        let out = model.forward_flow_batch(&batch)?;
        let l = batch.seq_len();
        return Ok(out
            .per_step_logits
            .iter()
            .map(|logits| {
                examples
                    .iter()
                    .enumerate()
                    .filter(|(b, e)| argmax(logits.row(b * l + l - 1)) == e.answer()[0])
                    .count()
            })
            .collect());
    }
    (0..t_max)
        .map(|t| {
            let decoded = greedy_decode(model, &prompts, answer_len, t)?;
            Ok(decoded.iter().zip(examples).filter(|(d, e)| d.as_slice() == e.answer()).count())
        })
        .collect()
}

/// Greedy exact-match accuracy of each iteration on `data`.
///
/// Examples are scored in chunks that may run on up to `workers` threads;
/// counts are merged in example order, so the result does not depend on the
/// worker count.
pub fn evaluate_per_iteration<S: Scalar>(model: &FlowModel<S>, data: &Dataset, workers: usize) -> Result<EvalReport> {
    const CHUNK: usize = 512;
    if data.is_empty() {
        return Err(Error::InvalidInput("evaluation split is empty".into()));
    }
    if let Some(e) = data.examples.iter().find(|e| e.tokens.len() != data.examples[0].tokens.len()) {
        return Err(Error::LengthMismatch {
            left: e.tokens.len(),
            right: data.examples[0].tokens.len(),
        });
    }
    let chunks: Vec<&[Example]> = data.examples.chunks(CHUNK).collect();
    let workers = workers.clamp(1, chunks.len());
    let mut results: Vec<Option<Result<Vec<usize>>>> = (0..chunks.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let slots: Vec<_> = results.chunks_mut(chunks.len().div_ceil(workers)).collect();
        let groups: Vec<_> = chunks.chunks(chunks.len().div_ceil(workers)).collect();
        for (slot, group) in slots.into_iter().zip(groups) {
            scope.spawn(move || {
                for (s, c) in slot.iter_mut().zip(group) {
                    *s = Some(correct_counts(model, c));
                }
            });
        }
    });
    let mut totals = vec![0usize; model.num_iterations()];
    for r in results {
        for (t, c) in totals.iter_mut().zip(r.expect("every chunk scored")?) {
            *t += c;
        }
    }
    let n = data.len();
    Ok(EvalReport {
        task: data.task.clone(),
        split: data.split,
        num_examples: n,
        per_iteration_accuracy: totals.iter().map(|&c| c as f64 / n as f64).collect(),
        baseline: None,
        metadata: BTreeMap::new(),
    })
}
