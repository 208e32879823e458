//! Synthetic sequence tasks with deterministic, key-disjoint splits.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::sha256_hex;
use crate::model::TokenBatch;
use crate::seed::SeedStreams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArithOp {
    Add,
    Sub,
}

/// Generator family and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskKind {
    /// `a + b = (a + b) mod p`, tokens `0..p`, then `+` and `=`.
    ModAdd { modulus: usize },
    /// Fixed-width decimal `a op b = c`, answers zero-padded to `digits + 1`.
    MultiDigit { digits: usize, op: ArithOp },
    /// `s_1 .. s_n | s_1 .. s_n`
    Copy { length: usize, symbols: usize },
    /// `s_1 .. s_n | s_n .. s_1`
    Reverse { length: usize, symbols: usize },
}

/// One task with its split assignment.
///
/// Each example has a generator key (operands or the source sequence). The
/// key is hashed with `split_seed` into a split, so the splits never share a
/// key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    #[serde(default = "default_split_seed")]
    pub split_seed: u64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_dev_fraction")]
    pub dev_fraction: f64,
}

fn default_split_seed() -> u64 {
    1234
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_dev_fraction() -> f64 {
    0.1
}

/// A full token sequence; tokens from `prompt_len` on form the answer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
}

impl Example {
    pub fn prompt(&self) -> &[usize] {
        &self.tokens[..self.prompt_len]
    }

    pub fn answer(&self) -> &[usize] {
        &self.tokens[self.prompt_len..]
    }
}

/// Examples of one task split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: String,
    pub split: Split,
    pub examples: Vec<Example>,
}

impl TaskSpec {
    pub fn mod_add(modulus: usize) -> Self {
        Self {
            name: "mod_add".into(),
            kind: TaskKind::ModAdd { modulus },
            split_seed: default_split_seed(),
            train_fraction: default_train_fraction(),
            dev_fraction: default_dev_fraction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        let f = (self.train_fraction, self.dev_fraction);
        if !(f.0 > 0.0 && f.1 >= 0.0 && f.0 + f.1 <= 1.0) {
            return bad(format!("split fractions {f:?} must be positive and sum to at most 1"));
        }
        match self.kind {
            TaskKind::ModAdd { modulus } if modulus < 2 => bad(format!("modulus {modulus} < 2")),
            TaskKind::MultiDigit { digits, .. } if !(1..=9).contains(&digits) => {
                bad(format!("digits {digits} outside 1..=9"))
            }
            TaskKind::Copy { length, symbols } | TaskKind::Reverse { length, symbols }
                if length == 0 || symbols < 2 =>
            {
                bad(format!("length {length} / symbols {symbols} too small"))
            }
            _ => Ok(()),
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self.kind {
            TaskKind::ModAdd { modulus } => modulus + 2,
            TaskKind::MultiDigit { .. } => 13,
            TaskKind::Copy { symbols, .. } | TaskKind::Reverse { symbols, .. } => symbols + 1,
        }
    }

    /// Length of every full example sequence.
    pub fn seq_len(&self) -> usize {
        self.prompt_len() + self.answer_len()
    }

    pub fn prompt_len(&self) -> usize {
        match self.kind {
            TaskKind::ModAdd { .. } => 4,
            TaskKind::MultiDigit { digits, .. } => 2 * digits + 2,
            TaskKind::Copy { length, .. } | TaskKind::Reverse { length, .. } => length + 1,
        }
    }

    pub fn answer_len(&self) -> usize {
        match self.kind {
            TaskKind::ModAdd { .. } => 1,
            TaskKind::MultiDigit { digits, .. } => digits + 1,
            TaskKind::Copy { length, .. } | TaskKind::Reverse { length, .. } => length,
        }
    }

    /// Model input length: the last answer token is never fed back.
    pub fn input_len(&self) -> usize {
        self.seq_len() - 1
    }

    fn split_of(&self, key: &[usize]) -> Split {
        let mut bytes = self.split_seed.to_le_bytes().to_vec();
        for k in key {
            bytes.extend_from_slice(&(*k as u64).to_le_bytes());
        }
        let h = sha256_hex(&bytes);
        let u = u64::from_str_radix(&h[..13], 16).unwrap() as f64 / (1u64 << 52) as f64;
        if u < self.train_fraction {
            Split::Train
        } else if u < self.train_fraction + self.dev_fraction {
            Split::Dev
        } else {
            Split::Test
        }
    }

    fn build(&self, key: &[usize]) -> Example {
        let mut tokens = Vec::with_capacity(self.seq_len());
        match self.kind {
            TaskKind::ModAdd { modulus } => {
                tokens.extend([key[0], modulus, key[1], modulus + 1, (key[0] + key[1]) % modulus]);
            }
            TaskKind::MultiDigit { digits, op } => {
                let (a, b) = (key[0], key[1]);
                let (c, sym) = match op {
                    ArithOp::Add => (a + b, 10),
                    ArithOp::Sub => (a - b, 11),
                };
                push_digits(&mut tokens, a, digits);
                tokens.push(sym);
                push_digits(&mut tokens, b, digits);
                tokens.push(12);
                push_digits(&mut tokens, c, digits + 1);
            }
            TaskKind::Copy { symbols, .. } => {
                tokens.extend_from_slice(key);
                tokens.push(symbols);
                tokens.extend_from_slice(key);
            }
            TaskKind::Reverse { symbols, .. } => {
                tokens.extend_from_slice(key);
                tokens.push(symbols);
                tokens.extend(key.iter().rev());
            }
        }
        Example {
            tokens,
            prompt_len: self.prompt_len(),
        }
    }

    fn random_key(&self, rng: &mut impl Rng) -> Vec<usize> {
        match self.kind {
            TaskKind::ModAdd { modulus } => vec![rng.random_range(0..modulus), rng.random_range(0..modulus)],
            TaskKind::MultiDigit { digits, op } => {
                let top = 10usize.pow(digits as u32);
                let (a, b) = (rng.random_range(0..top), rng.random_range(0..top));
                match op {
                    ArithOp::Sub if a < b => vec![b, a],
                    _ => vec![a, b],
                }
            }
            TaskKind::Copy { length, symbols } | TaskKind::Reverse { length, symbols } => {
                (0..length).map(|_| rng.random_range(0..symbols)).collect()
            }
        }
    }

    /// Examples of `split`. Modular addition enumerates every key of the
    /// split (truncated to `limit`); the other tasks sample `limit`
    /// distinct keys, which is then required.
    pub fn dataset(&self, split: Split, limit: Option<usize>) -> Result<Dataset> {
        self.validate()?;
        let streams = SeedStreams::new(self.split_seed);
        let mut rng = streams.rng(&format!("task/{}/{split}", self.name));
        let examples = match self.kind {
            TaskKind::ModAdd { modulus } => {
                let mut keys: Vec<Vec<usize>> = (0..modulus)
                    .flat_map(|a| (0..modulus).map(move |b| vec![a, b]))
                    .filter(|k| self.split_of(k) == split)
                    .collect();
                keys.shuffle(&mut rng);
                keys.truncate(limit.unwrap_or(usize::MAX));
                keys.iter().map(|k| self.build(k)).collect()
            }
            _ => {
                let n = limit.ok_or_else(|| {
                    Error::InvalidInput(format!("task {} needs an explicit example count", self.name))
                })?;
                let mut seen = std::collections::HashSet::new();
                let mut out = Vec::with_capacity(n);
                let mut attempts = 0usize;
                while out.len() < n {
                    attempts += 1;
                    if attempts > 100 * n + 10_000 {
                        return Err(Error::InvalidInput(format!(
                            "task {} cannot supply {n} distinct {split} examples",
                            self.name
                        )));
                    }
                    let key = self.random_key(&mut rng);
                    if self.split_of(&key) == split && seen.insert(key.clone()) {
                        out.push(self.build(&key));
                    }
                }
                out
            }
        };
        if examples.is_empty() {
            return Err(Error::InvalidInput(format!("{split} split of {} is empty", self.name)));
        }
        Ok(Dataset {
            task: self.name.clone(),
            split,
            examples,
        })
    }
}

fn push_digits(out: &mut Vec<usize>, mut v: usize, width: usize) {
    let start = out.len();
    for _ in 0..width {
        out.push(v % 10);
        v /= 10;
    }
    out[start..].reverse();
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// SHA-256 over the task name, split and every token sequence.
    pub fn checksum(&self) -> String {
        let mut bytes = format!("{}/{}", self.task, self.split).into_bytes();
        for e in &self.examples {
            bytes.extend_from_slice(&(e.prompt_len as u64).to_le_bytes());
            for &t in &e.tokens {
                bytes.extend_from_slice(&(t as u64).to_le_bytes());
            }
            bytes.push(0xff);
        }
        sha256_hex(&bytes)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            task: self.task.clone(),
            split: self.split,
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }
}

/// Teacher-forced next-token batch. Row `b * seq_len + i` of the model
/// output predicts `targets[b * seq_len + i]`; only `mask`ed rows (answer
/// predictions) enter the losses.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub inputs: TokenBatch,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TrainingBatch {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Result<Self> {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut mask = Vec::new();
        for e in examples {
            let n = e.tokens.len();
            if n < 2 || e.prompt_len == 0 || e.prompt_len >= n {
                return Err(Error::InvalidInput("example needs a prompt and an answer".into()));
            }
            inputs.push(&e.tokens[..n - 1]);
            targets.extend_from_slice(&e.tokens[1..]);
            mask.extend((1..n).map(|i| i >= e.prompt_len));
        }
        Ok(Self {
            inputs: TokenBatch::new(&inputs)?,
            targets,
            mask,
        })
    }

    pub fn masked_rows(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    pub fn masked_targets(&self) -> Vec<usize> {
        self.mask
            .iter()
            .zip(&self.targets)
            .filter(|(&m, _)| m)
            .map(|(_, &t)| t)
            .collect()
    }
}
