//! Named random streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives independent, reproducible RNG streams (`"init"`, `"data"`,
/// `"task"`, ...) from a single root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    root: u64,
}

impl SeedStreams {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn rng(&self, stream: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.root.to_le_bytes());
        h.update(stream.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    /// Integer sub-seed for a named stream.
    pub fn derive(&self, stream: &str) -> u64 {
        use rand::RngCore;
        self.rng(stream).next_u64()
    }
}
