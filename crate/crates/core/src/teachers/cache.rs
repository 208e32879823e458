//! Precomputed soft targets and their on-disk cache.
//!
//! File layout: 8-byte magic, `u32` version, then a JSON header (length
//! prefixed, `u64`) naming the teacher checksum, dataset checksum, dtype,
//! vocabulary, row counts and the SHA-256 of the payload. The payload is a
//! sequence of records `(sequence id: u64, position: u64, row values)`.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::sha256_hex;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"SCOUTSTC";
const VERSION: u32 = 1;

/// Teacher distributions over the student vocabulary at every supervised
/// position of a dataset, in example order.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargetTable<S> {
    pub vocab: usize,
    /// Supervised positions (input row indices) of each example.
    pub positions: Vec<Vec<usize>>,
    /// Row-major probabilities, rows ordered by example then position.
    pub data: Vec<S>,
    offsets: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheHeader {
    teacher_checksum: String,
    dataset_checksum: String,
    dtype: String,
    vocab: usize,
    num_sequences: usize,
    num_rows: usize,
    payload_sha256: String,
}

impl<S: Scalar> SoftTargetTable<S> {
    pub fn new(vocab: usize, positions: Vec<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(positions.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for p in &positions {
            acc += p.len();
            offsets.push(acc);
        }
        if acc * vocab != data.len() {
            return Err(Error::LengthMismatch {
                left: data.len(),
                right: acc * vocab,
            });
        }
        Ok(Self {
            vocab,
            positions,
            data,
            offsets,
        })
    }

    pub fn num_sequences(&self) -> usize {
        self.positions.len()
    }

    pub fn num_rows(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Rows of example `i` as a `positions x vocab` slice.
    pub fn example_rows(&self, i: usize) -> &[S] {
        &self.data[self.offsets[i] * self.vocab..self.offsets[i + 1] * self.vocab]
    }

    /// Stacks the rows of the given examples, in order.
    pub fn gather(&self, examples: &[usize]) -> Arc<Tensor<S>> {
        let mut data = Vec::new();
        for &i in examples {
            data.extend_from_slice(self.example_rows(i));
        }
        let rows = data.len() / self.vocab.max(1);
        Arc::new(Tensor::new(vec![rows, self.vocab], data).expect("consistent table"))
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_rows() * (16 + self.vocab * S::BYTES));
        for (seq, pos) in self.positions.iter().enumerate() {
            let rows = self.example_rows(seq);
            for (k, &p) in pos.iter().enumerate() {
                out.extend_from_slice(&(seq as u64).to_le_bytes());
                out.extend_from_slice(&(p as u64).to_le_bytes());
                for &v in &rows[k * self.vocab..(k + 1) * self.vocab] {
                    v.write_le(&mut out);
                }
            }
        }
        out
    }

    pub fn to_bytes(&self, teacher_checksum: &str, dataset_checksum: &str) -> Result<Vec<u8>> {
        let payload = self.payload();
        let header = CacheHeader {
            teacher_checksum: teacher_checksum.into(),
            dataset_checksum: dataset_checksum.into(),
            dtype: S::DTYPE.into(),
            vocab: self.vocab,
            num_sequences: self.num_sequences(),
            num_rows: self.num_rows(),
            payload_sha256: sha256_hex(&payload),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses a cache file, checking it belongs to the given teacher and
    /// dataset and that the payload is intact.
    pub fn from_bytes(bytes: &[u8], teacher_checksum: &str, dataset_checksum: &str) -> Result<Self> {
        let fail = |m: String| Error::Format(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail("not a soft-target cache".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(fail(format!("unsupported cache version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = bytes.get(20..20 + hlen).ok_or_else(|| fail("truncated cache header".into()))?;
        let h: CacheHeader = serde_json::from_slice(json)?;
        if h.teacher_checksum != teacher_checksum || h.dataset_checksum != dataset_checksum {
            return Err(fail("cache key does not match teacher/dataset".into()));
        }
        if h.dtype != S::DTYPE {
            return Err(fail(format!("cache holds {} values", h.dtype)));
        }
        let payload = &bytes[20 + hlen..];
        if sha256_hex(payload) != h.payload_sha256 {
            return Err(fail("cache payload checksum mismatch".into()));
        }
        let record = 16 + h.vocab * S::BYTES;
        if payload.len() != h.num_rows * record {
            return Err(fail("cache payload has wrong length".into()));
        }
        let mut positions = vec![Vec::new(); h.num_sequences];
        let mut data = Vec::with_capacity(h.num_rows * h.vocab);
        let mut last = 0usize;
        for rec in payload.chunks_exact(record) {
            let seq = u64::from_le_bytes(rec[..8].try_into().unwrap()) as usize;
            let pos = u64::from_le_bytes(rec[8..16].try_into().unwrap()) as usize;
            if seq >= h.num_sequences || seq < last {
                return Err(fail("cache records out of order".into()));
            }
            last = seq;
            positions[seq].push(pos);
            data.extend(rec[16..].chunks_exact(S::BYTES).map(S::read_le));
        }
        Self::new(h.vocab, positions, data)
    }

    pub fn save(&self, path: &Path, teacher_checksum: &str, dataset_checksum: &str) -> Result<()> {
        let bytes = self.to_bytes(teacher_checksum, dataset_checksum)?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, teacher_checksum: &str, dataset_checksum: &str) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, teacher_checksum, dataset_checksum)
    }
}
