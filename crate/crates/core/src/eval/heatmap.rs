use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FlowModel, TokenBatch};
use crate::numerics::softmax;
use crate::scalar::Scalar;

/// Next-token probabilities of selected candidates at every iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRecord {
    pub prompt: Vec<usize>,
    pub candidates: Vec<usize>,
    /// Per iteration: one probability per candidate, then the remaining
    /// mass of all other tokens.
    pub rows: Vec<Vec<f64>>,
}

/// Probabilities of `candidates` for the token following `prompt`, taken
/// from each iteration's distribution over the full vocabulary.
pub fn token_heatmap<S: Scalar>(model: &FlowModel<S>, prompt: &[usize], candidates: &[usize]) -> Result<HeatmapRecord> {
    let vocab = model.config().vocab_size;
    if let Some(&c) = candidates.iter().find(|&&c| c >= vocab) {
        return Err(Error::IndexOutOfRange { index: c, size: vocab });
    }
    let out = model.forward_flow_batch(&TokenBatch::single(prompt)?)?;
    let last = prompt.len() - 1;
    let rows = out
        .per_step_logits
        .iter()
        .map(|logits| {
            let p = softmax(&logits.select_rows(&[last])?, 1)?;
            let row = p.row(0);
            let mut taken = vec![false; vocab];
            let mut values: Vec<f64> = candidates.iter().map(|&c| row[c].as_f64()).collect();
            for &c in candidates {
                taken[c] = true;
            }
            let other = row
                .iter()
                .zip(&taken)
                .filter(|(_, &t)| !t)
                .map(|(v, _)| v.as_f64())
                .sum();
            values.push(other);
            Ok(values)
        })
        .collect::<Result<_>>()?;
    Ok(HeatmapRecord {
        prompt: prompt.to_vec(),
        candidates: candidates.to_vec(),
        rows,
    })
}

impl HeatmapRecord {
    /// Columns: `iteration`, `tok_<id>` per candidate, `other`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration");
        for c in &self.candidates {
            let _ = write!(out, ",tok_{c}");
        }
        out.push_str(",other\n");
        for (t, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{}", t + 1);
            for v in row {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }
}
