//! Partitioned decoder transformer with recursive latent refinement.

pub mod checkpoint;
pub mod config;
pub mod flow;
pub mod params;
pub mod partition;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use flow::FlowModel;
pub use params::{Param, ParamGroup, ParamStore};
pub use partition::{partition_model, PartitionCase, PartitionSpec};

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

/// Latent state `z^(t)` of one sequence: `seq_len x model_dim` values (or
/// `batch * seq_len` rows when produced from a batch).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState<S> {
    pub values: Tensor<S>,
    pub iteration_index: usize,
}

/// Graph-resident latent state.
#[derive(Debug, Clone, Copy)]
pub struct LatentVar<'g, S: crate::Scalar> {
    pub values: Var<'g, S>,
    pub iteration_index: usize,
}

/// Logits and latent states of every recursive iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutputs<S> {
    /// One `rows x vocab_size` logit matrix per iteration.
    pub per_step_logits: Vec<Tensor<S>>,
    pub per_step_states: Vec<LatentState<S>>,
}

/// Equal-length token sequences, flattened row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    tokens: Vec<usize>,
    batch: usize,
    seq_len: usize,
}

impl TokenBatch {
    pub fn new<T: AsRef<[usize]>>(seqs: &[T]) -> Result<Self> {
        let seq_len = seqs.first().map_or(0, |s| s.as_ref().len());
        if seqs.is_empty() || seq_len == 0 {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        let mut tokens = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            let s = s.as_ref();
            if s.len() != seq_len {
                return Err(Error::LengthMismatch {
                    left: s.len(),
                    right: seq_len,
                });
            }
            tokens.extend_from_slice(s);
        }
        Ok(Self {
            tokens,
            batch: seqs.len(),
            seq_len,
        })
    }

    pub fn single(seq: &[usize]) -> Result<Self> {
        Self::new(&[seq])
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn sequence(&self, b: usize) -> &[usize] {
        &self.tokens[b * self.seq_len..(b + 1) * self.seq_len]
    }
}
