use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use scout_core::hash::sha256_hex;
use scout_core::{Error, Result};

/// One file written by a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: String,
    /// Relative to the output directory.
    pub path: PathBuf,
    pub sha256: String,
}

/// Record of one command invocation: what ran, with which configuration,
/// and every artifact it produced or reused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub artifacts: Vec<Artifact>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
    #[serde(default)]
    pub notices: Vec<String>,
    #[serde(default)]
    pub failures: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config_sha256: String, seed: u64) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_sha256,
            seed,
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
            notices: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn add(&mut self, kind: &str, path: PathBuf, sha256: String) {
        self.artifacts.push(Artifact {
            kind: kind.into(),
            path,
            sha256,
        });
    }

    pub fn notice(&mut self, msg: String) {
        log::info!("{msg}");
        self.notices.push(msg);
    }

    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.timings.entry(phase.into()).or_default() += start.elapsed().as_secs_f64();
        out
    }

    pub fn artifacts_of<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a Artifact> + 'a {
        self.artifacts.iter().filter(move |a| a.kind == kind)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_file(path, text.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.into(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes `bytes`, creating parent directories, and returns their SHA-256.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<String> {
    let io = |source| Error::Io {
        path: path.into(),
        source,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, bytes).map_err(io)?;
    Ok(sha256_hex(bytes))
}
