use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Layer-split strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionCase {
    /// Embedding + first third as head, middle third recursive, last third + projection as tail.
    Case1,
    /// Embedding + first half as head, remaining half recursive, projection-only tail.
    Case2,
}

impl fmt::Display for PartitionCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PartitionCase::Case1 => "case1",
            PartitionCase::Case2 => "case2",
        })
    }
}

impl FromStr for PartitionCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "case1" | "1" => Ok(PartitionCase::Case1),
            "case2" | "2" => Ok(PartitionCase::Case2),
            other => Err(Error::InvalidConfig(format!(
                "unknown partition case `{other}` (expected case1 or case2)"
            ))),
        }
    }
}

/// Head / recursive / tail split of a transformer's layers. The head always
/// owns the embeddings and the tail always owns the output projection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub head_layers: Range<usize>,
    pub recursive_layers: Range<usize>,
    pub tail_layers: Range<usize>,
    pub head_includes_embedding: bool,
    pub tail_includes_projection: bool,
}

impl PartitionSpec {
    pub fn num_layers(&self) -> usize {
        self.tail_layers.end
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let contiguous = self.head_layers.start == 0
            && self.head_layers.end == self.recursive_layers.start
            && self.recursive_layers.end == self.tail_layers.start
            && self.tail_layers.end == num_layers;
        if !contiguous || self.recursive_layers.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "partition {:?}/{:?}/{:?} does not tile {num_layers} layers with a nonempty recursive block",
                self.head_layers, self.recursive_layers, self.tail_layers
            )));
        }
        if !self.head_includes_embedding || !self.tail_includes_projection {
            return Err(Error::InvalidConfig(
                "head must own the embedding and tail the output projection".into(),
            ));
        }
        Ok(())
    }
}

/// Splits `config.num_layers` according to `case`.
///
/// Case 2 gives the head `ceil(L/2)` layers and leaves a projection-only
/// tail. Case 1 gives the head `ceil(L/3)` layers, the tail
/// `floor((L - head) / 2)` layers and the recursive block the rest.
pub fn partition_model(config: &ModelConfig, case: PartitionCase) -> Result<PartitionSpec> {
    let l = config.num_layers;
    if l < 2 {
        return Err(Error::InvalidConfig(format!(
            "partitioning needs at least 2 layers, got {l}"
        )));
    }
    let (head, tail) = match case {
        PartitionCase::Case2 => (l.div_ceil(2), 0),
        PartitionCase::Case1 => {
            let head = l.div_ceil(3);
            (head, (l - head) / 2)
        }
    };
    let spec = PartitionSpec {
        head_layers: 0..head,
        recursive_layers: head..l - tail,
        tail_layers: l - tail..l,
        head_includes_embedding: true,
        tail_includes_projection: true,
    };
    spec.validate(l)?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layers: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 4,
            model_dim: 4,
            num_heads: 1,
            num_layers: layers,
            max_seq_len: 4,
            num_iterations: 3,
            ffn_mult: 4,
            init_std: 0.02,
        }
    }

    #[test]
    fn documented_splits() {
        let p = partition_model(&cfg(8), PartitionCase::Case2).unwrap();
        assert_eq!((p.head_layers, p.recursive_layers, p.tail_layers), (0..4, 4..8, 8..8));

        let p = partition_model(&cfg(6), PartitionCase::Case1).unwrap();
        assert_eq!((p.head_layers, p.recursive_layers, p.tail_layers), (0..2, 2..4, 4..6));

        let p = partition_model(&cfg(2), PartitionCase::Case2).unwrap();
        assert_eq!((p.head_layers, p.recursive_layers), (0..1, 1..2));
    }

    #[test]
    fn odd_layer_counts_favor_the_head() {
        let p = partition_model(&cfg(5), PartitionCase::Case2).unwrap();
        assert_eq!((p.head_layers, p.recursive_layers), (0..3, 3..5));
        let p = partition_model(&cfg(2), PartitionCase::Case1).unwrap();
        assert_eq!((p.head_layers, p.recursive_layers, p.tail_layers), (0..1, 1..2, 2..2));
    }

    #[test]
    fn every_split_tiles_all_layers() {
        for l in 2..40 {
            for case in [PartitionCase::Case1, PartitionCase::Case2] {
                let p = partition_model(&cfg(l), case).unwrap();
                assert!(p.validate(l).is_ok(), "{l} {case}");
            }
        }
    }

    #[test]
    fn single_layer_rejected() {
        assert!(partition_model(&cfg(1), PartitionCase::Case2).is_err());
    }
}
