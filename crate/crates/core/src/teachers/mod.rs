//! Capacity ladder of frozen teachers and the soft targets they provide.

pub mod cache;

pub use cache::SoftTargetTable;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::task::{Dataset, Example, TaskSpec, TrainingBatch};
use crate::model::{Checkpoint, FlowModel, ModelConfig, TokenBatch};
use crate::numerics::{kl_divergence, softmax, Distribution, Tensor};
use crate::scalar::Scalar;
use crate::training::{pretrain_backbone, SupervisionPlan, TrainConfig};

/// Shape of one ladder rung.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub capacity_rank: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    /// Defaults to the task vocabulary.
    #[serde(default)]
    pub vocab_size: Option<usize>,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Peak learning rate of this rung; the shared optimizer rate when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
}

fn default_heads() -> usize {
    4
}

fn default_init_std() -> f64 {
    0.02
}

impl TeacherSpec {
    pub fn model_config(&self, task: &TaskSpec) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size.unwrap_or(task.vocab_size()),
            model_dim: self.model_dim,
            num_heads: self.num_heads,
            num_layers: self.num_layers,
            max_seq_len: task.input_len(),
            num_iterations: 1,
            ffn_mult: 4,
            init_std: self.init_std,
        }
    }
}

/// A frozen, non-recursive teacher.
#[derive(Debug, Clone)]
pub struct Teacher<S: Scalar> {
    pub spec: TeacherSpec,
    pub model: FlowModel<S>,
    pub final_loss: Option<f64>,
}

impl<S: Scalar> Teacher<S> {
    pub fn checkpoint(&self) -> Checkpoint<S> {
        let mut ck = Checkpoint::new(self.model.clone());
        ck.frozen = true;
        ck.metadata.insert("capacity_rank".into(), self.spec.capacity_rank.into());
        ck.metadata.insert("spec".into(), serde_json::to_value(&self.spec).unwrap());
        if let Some(l) = self.final_loss {
            ck.metadata.insert("final_loss".into(), l.into());
        }
        ck
    }

    pub fn from_checkpoint(ck: Checkpoint<S>) -> Result<Self> {
        if !ck.frozen {
            return Err(Error::Format("teacher checkpoint is not marked frozen".into()));
        }
        let spec = ck
            .metadata
            .get("spec")
            .cloned()
            .ok_or_else(|| Error::Format("teacher checkpoint lacks its spec".into()))?;
        Ok(Self {
            spec: serde_json::from_value(spec)?,
            final_loss: ck.metadata.get("final_loss").and_then(|v| v.as_f64()),
            model: ck.model,
        })
    }
}

/// Teachers ordered by strictly increasing capacity rank.
#[derive(Debug, Clone)]
pub struct TeacherLadder<S: Scalar> {
    teachers: Vec<Teacher<S>>,
}

/// Checks rank ordering and parameter-count monotonicity of ladder specs.
pub fn validate_specs(specs: &[TeacherSpec], task: &TaskSpec) -> Result<()> {
    let mut prev: Option<(usize, usize)> = None;
    for s in specs {
        let count = s.model_config(task).backbone_param_count();
        if let Some((rank, params)) = prev {
            if s.capacity_rank <= rank {
                return Err(Error::InvalidInput(format!(
                    "teacher capacity ranks must be strictly increasing (duplicate or out of order: {})",
                    s.capacity_rank
                )));
            }
            if count < params {
                return Err(Error::InvalidInput(format!(
                    "teacher of rank {} has fewer parameters than its predecessor",
                    s.capacity_rank
                )));
            }
        }
        prev = Some((s.capacity_rank, count));
    }
    Ok(())
}

impl<S: Scalar> TeacherLadder<S> {
    pub fn new(teachers: Vec<Teacher<S>>) -> Result<Self> {
        for w in teachers.windows(2) {
            if w[1].spec.capacity_rank <= w[0].spec.capacity_rank {
                return Err(Error::InvalidInput(format!(
                    "teacher capacity ranks must be strictly increasing (duplicate or out of order: {})",
                    w[1].spec.capacity_rank
                )));
            }
            if w[1].model.params().numel() < w[0].model.params().numel() {
                return Err(Error::InvalidInput("teacher parameter counts must be nondecreasing".into()));
            }
        }
        Ok(Self { teachers })
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn get(&self, i: usize) -> &Teacher<S> {
        &self.teachers[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Teacher<S>> {
        self.teachers.iter()
    }

    /// Soft-target tables over `data` for every teacher `plan` uses.
    pub fn targets_for(
        &self,
        plan: &SupervisionPlan,
        data: &Dataset,
        student_vocab: usize,
    ) -> Result<BTreeMap<usize, SoftTargetTable<S>>> {
        plan.teachers_used()
            .into_iter()
            .map(|id| {
                if id >= self.len() {
                    return Err(Error::InvalidPlan(format!("teacher {id} not in a ladder of {}", self.len())));
                }
                Ok((id, soft_target_table(&self.teachers[id].model, data, student_vocab)?))
            })
            .collect()
    }
}

/// Trains a plain teacher of the given shape with cross-entropy.
pub fn train_teacher<S: Scalar>(
    spec: &TeacherSpec,
    task: &TaskSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Teacher<S>> {
    let mut model = FlowModel::plain(spec.model_config(task), seed)?;
    let cfg = TrainConfig {
        lr: spec.lr.unwrap_or(cfg.lr),
        ..cfg.clone()
    };
    let out = pretrain_backbone(&mut model, data, &cfg, seed)?;
    Ok(Teacher {
        spec: spec.clone(),
        model,
        final_loss: out.final_loss(),
    })
}

fn teacher_logits<S: Scalar>(teacher: &FlowModel<S>, batch: &TokenBatch) -> Result<Tensor<S>> {
    let mut out = teacher.forward_flow_batch(batch)?;
    Ok(out.per_step_logits.pop().expect("at least one iteration"))
}

/// Per-position teacher distribution over the teacher vocabulary.
pub fn soft_targets<S: Scalar>(teacher: &FlowModel<S>, x: &[usize]) -> Result<Distribution<S>> {
    softmax(&teacher_logits(teacher, &TokenBatch::single(x)?)?, 1)
}

/// Keeps the first `student_vocab` logits of every row and normalizes over
/// them, so the mass of dropped ids is spread proportionally.
pub fn truncate_renormalize<S: Scalar>(teacher_logits: &Tensor<S>, student_vocab: usize) -> Result<Distribution<S>> {
    let (rows, vocab) = teacher_logits.dims2()?;
    if student_vocab > vocab || student_vocab == 0 {
        return Err(Error::SupportMismatch {
            left: vocab,
            right: student_vocab,
        });
    }
    if student_vocab == vocab {
        return softmax(teacher_logits, 1);
    }
    let mut kept = Vec::with_capacity(rows * student_vocab);
    for r in 0..rows {
        kept.extend_from_slice(&teacher_logits.row(r)[..student_vocab]);
    }
    softmax(&Tensor::new(vec![rows, student_vocab], kept)?, 1)
}

/// Teacher-forced soft targets at the supervised positions of every example.
pub fn soft_target_table<S: Scalar>(
    teacher: &FlowModel<S>,
    data: &Dataset,
    student_vocab: usize,
) -> Result<SoftTargetTable<S>> {
    const CHUNK: usize = 256;
    let mut positions = Vec::with_capacity(data.len());
    let mut values = Vec::new();
    for chunk in data.examples.chunks(CHUNK) {
        let batch = TrainingBatch::from_examples(chunk)?;
        let rows = batch.masked_rows();
        let logits = teacher_logits(teacher, &batch.inputs)?.select_rows(&rows)?;
        values.extend_from_slice(truncate_renormalize(&logits, student_vocab)?.probs().data());
        let seq = batch.inputs.seq_len();
        for b in 0..chunk.len() {
            positions.push(
                rows.iter()
                    .filter(|&&r| r / seq == b)
                    .map(|&r| r % seq)
                    .collect(),
            );
        }
    }
    SoftTargetTable::new(student_vocab, positions, values)
}

/// Mean `KL(teacher || student)` over the supervised positions of
/// `prompts`, one entry `(capacity_rank, kl)` per ladder teacher.
///
/// The student's final-iteration distribution is compared with each
/// teacher's truncated distribution.
pub fn measure_kl_ladder<S: Scalar>(
    student: &FlowModel<S>,
    ladder: &TeacherLadder<S>,
    prompts: &[Example],
) -> Result<Vec<(usize, f64)>> {
    if prompts.is_empty() {
        return Err(Error::InvalidInput("KL ladder needs at least one prompt".into()));
    }
    let batch = TrainingBatch::from_examples(prompts)?;
    let rows = batch.masked_rows();
    let mut out = student.forward_flow_batch(&batch.inputs)?;
    let student_logits = out.per_step_logits.pop().expect("at least one iteration");
    let p = softmax(&student_logits.select_rows(&rows)?, 1)?;
    let vocab = student.config().vocab_size;
    ladder
        .iter()
        .map(|t| {
            let logits = teacher_logits(&t.model, &batch.inputs)?.select_rows(&rows)?;
            let q = truncate_renormalize(&logits, vocab)?;
            Ok((t.spec.capacity_rank, kl_divergence(&q, &p)?.as_f64()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_truncate_to_uniform() {
        let t = Tensor::<f64>::from_f64(&[1, 5], &[1.0; 5]).unwrap();
        let d = truncate_renormalize(&t, 4).unwrap();
        for &p in d.row(0) {
            assert!((p - 0.25).abs() < 1e-15);
        }
        assert!(truncate_renormalize(&t, 6).is_err());
    }

    #[test]
    fn equal_vocab_is_plain_softmax() {
        let t = Tensor::<f64>::from_f64(&[2, 3], &[0.1, -2.0, 3.0, 1.0, 1.5, -0.5]).unwrap();
        assert_eq!(truncate_renormalize(&t, 3).unwrap(), softmax(&t, 1).unwrap());
    }

    #[test]
    fn duplicate_ranks_rejected() {
        let task = TaskSpec::mod_add(5);
        let s = |rank, d| TeacherSpec {
            capacity_rank: rank,
            model_dim: d,
            num_layers: 1,
            num_heads: 1,
            vocab_size: None,
            init_std: 0.1,
            lr: None,
        };
        assert!(validate_specs(&[s(1, 4), s(2, 8)], &task).is_ok());
        assert!(validate_specs(&[s(1, 4), s(1, 8)], &task).is_err());
        assert!(validate_specs(&[s(1, 8), s(2, 4)], &task).is_err());
    }
}
