use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_ffn_mult() -> usize {
    4
}

fn default_init_std() -> f64 {
    0.02
}

/// Shape of a partitioned decoder transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub max_seq_len: usize,
    /// Number of recursive iterations `T`.
    pub num_iterations: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    /// Standard deviation of the normal weight init.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size == 0 || self.model_dim == 0 || self.num_heads == 0 {
            return bad("vocab_size, model_dim and num_heads must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.num_layers == 0 || self.max_seq_len == 0 || self.ffn_mult == 0 {
            return bad("num_layers, max_seq_len and ffn_mult must be positive".into());
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad("init_std must be positive".into());
        }
        if self.num_iterations == 0 {
            return bad("num_iterations must be at least 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.model_dim * self.ffn_mult
    }

    /// Parameters of the plain stack: embeddings, layers and output projection.
    pub fn backbone_param_count(&self) -> usize {
        let d = self.model_dim;
        let f = self.ffn_dim();
        let per_layer = 4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
        self.vocab_size * d + self.max_seq_len * d + self.num_layers * per_layer + d * self.vocab_size + self.vocab_size
    }
}
