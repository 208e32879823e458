//! Run configuration: one TOML file per run.
//!
//! Sections: `[model]`, `[partition]`, `[mechanism]`, `[plan]`,
//! `[optimizer]`, `[data]`, `[seed]`, plus the command-specific `[ladder]`,
//! `[ablate]`, `[heatmap]` and `[paths]`. Unknown keys anywhere
//! are rejected. Which sections are required depends on the command.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use scout_core::eval::{Split, TaskSpec};
use scout_core::hash::sha256_hex;
use scout_core::model::{ModelConfig, PartitionCase};
use scout_core::retrospective::MechanismKind;
use scout_core::teachers::{validate_specs, TeacherSpec};
use scout_core::training::{PlanMode, TrainConfig, DEFAULT_ALPHA};
use scout_core::{Error, Result};

/// Subcommand a configuration is checked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Pretrain,
    Ladder,
    Train,
    Eval,
    Ablate,
    Heatmap,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Ladder => "ladder",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Heatmap => "heatmap",
        }
    }

    pub fn required_sections(&self) -> &'static [&'static str] {
        match self {
            Command::Pretrain => &["model", "optimizer", "data", "seed"],
            Command::Ladder => &["ladder", "optimizer", "data", "seed"],
            Command::Train | Command::Ablate => {
                &["model", "partition", "mechanism", "plan", "optimizer", "data", "seed"]
            }
            Command::Eval | Command::Heatmap => &["data", "seed"],
        }
    }
}

/// Student backbone shape; vocabulary and context length follow the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_ffn_mult() -> usize {
    4
}

fn default_init_std() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub case: PartitionCase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismSection {
    pub kind: MechanismKind,
    /// Recursive iterations `T`.
    #[serde(default = "default_iterations")]
    pub iterations: usize,
}

fn default_iterations() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    /// One of `sft`, `dsft`, `r_sft`, `r_distill_eq`, `r_distill_wt`,
    /// `r_scout`, `scout`.
    pub mode: String,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl PlanSection {
    pub fn plan_mode(&self) -> Result<PlanMode> {
        self.mode.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub task: TaskSpec,
    /// Cap on training examples (all of the split when absent).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default = "default_eval_split")]
    pub eval_split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_limit: Option<usize>,
}

fn default_eval_split() -> Split {
    Split::Dev
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSection {
    pub root: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderSection {
    pub teachers: Vec<TeacherSpec>,
}

/// Cross-product axes; an empty axis falls back to the value of the
/// corresponding primary section.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    #[serde(default)]
    pub mechanisms: Vec<MechanismKind>,
    #[serde(default)]
    pub partitions: Vec<PartitionCase>,
    #[serde(default)]
    pub modes: Vec<String>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapSection {
    /// Number of evaluation-split prompts to export.
    #[serde(default = "default_heatmap_prompts")]
    pub prompts: usize,
    /// Token ids tracked per iteration; the reference answer token when empty.
    #[serde(default)]
    pub candidates: Vec<usize>,
}

fn default_heatmap_prompts() -> usize {
    4
}

/// Input artifacts. Relative paths resolve against the working directory;
/// absent entries default to the locations the producing command writes
/// under `--out`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder: Option<PathBuf>,
    /// Checkpoint evaluated by `eval` and `heatmap`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Structured report of a baseline run; adds the delta columns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mechanism: Option<MechanismSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<PlanSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<SeedSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder: Option<LadderSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablate: Option<AblateSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heatmap: Option<HeatmapSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<PathsSection>,
}

fn invalid(path: &str, e: impl std::fmt::Display) -> Error {
    Error::validation(path, e.to_string())
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T> {
    s.as_ref()
        .ok_or_else(|| invalid(name, format!("missing [{name}] section")))
}

impl RunConfig {
    /// Parses TOML text. Unknown keys are rejected with their dotted path.
    pub fn parse(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| invalid("<document>", e.message()))?;
        serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            invalid(&path, e.into_inner())
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.into(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }

    /// Checksum of the canonical serialization.
    pub fn checksum(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn model(&self) -> Result<&ModelSection> {
        section(&self.model, "model")
    }
    pub fn partition(&self) -> Result<&PartitionSection> {
        section(&self.partition, "partition")
    }
    pub fn mechanism(&self) -> Result<&MechanismSection> {
        section(&self.mechanism, "mechanism")
    }
    pub fn plan(&self) -> Result<&PlanSection> {
        section(&self.plan, "plan")
    }
    pub fn optimizer(&self) -> Result<&TrainConfig> {
        section(&self.optimizer, "optimizer")
    }
    pub fn data(&self) -> Result<&DataSection> {
        section(&self.data, "data")
    }
    pub fn seed(&self) -> Result<u64> {
        Ok(section(&self.seed, "seed")?.root)
    }
    pub fn ladder(&self) -> Result<&LadderSection> {
        section(&self.ladder, "ladder")
    }

    pub fn paths(&self) -> PathsSection {
        self.paths.clone().unwrap_or_default()
    }

    /// Backbone configuration of the student: `T = 1`, task-sized vocabulary
    /// and context.
    pub fn backbone_config(&self) -> Result<ModelConfig> {
        let m = self.model()?;
        let task = &self.data()?.task;
        Ok(ModelConfig {
            vocab_size: task.vocab_size(),
            model_dim: m.model_dim,
            num_heads: m.num_heads,
            num_layers: m.num_layers,
            max_seq_len: task.input_len(),
            num_iterations: 1,
            ffn_mult: m.ffn_mult,
            init_std: m.init_std,
        })
    }

    /// Checks that every section `command` needs is present and valid.
    pub fn validate(&self, command: Command) -> Result<()> {
        for &name in command.required_sections() {
            let present = match name {
                "model" => self.model.is_some(),
                "partition" => self.partition.is_some(),
                "mechanism" => self.mechanism.is_some(),
                "plan" => self.plan.is_some(),
                "optimizer" => self.optimizer.is_some(),
                "data" => self.data.is_some(),
                "seed" => self.seed.is_some(),
                "ladder" => self.ladder.is_some(),
                _ => unreachable!("unknown section {name}"),
            };
            if !present {
                return Err(invalid(name, format!("missing [{name}] section required by `{}`", command.name())));
            }
        }
        if let Some(d) = &self.data {
            d.task.validate().map_err(|e| invalid("data.task", e))?;
            if d.train_limit == Some(0) || d.eval_limit == Some(0) {
                return Err(invalid("data", "example limits must be positive"));
            }
        }
        if let Some(o) = &self.optimizer {
            o.validate().map_err(|e| invalid("optimizer", e))?;
        }
        if self.model.is_some() && self.data.is_some() {
            self.backbone_config()?.validate().map_err(|e| invalid("model", e))?;
        }
        if let Some(m) = &self.mechanism {
            if m.iterations == 0 {
                return Err(invalid("mechanism.iterations", "must be at least 1"));
            }
        }
        if let Some(p) = &self.plan {
            p.plan_mode().map_err(|e| invalid("plan.mode", e))?;
            if !(0.0..=1.0).contains(&p.alpha) {
                return Err(invalid("plan.alpha", format!("{} outside [0, 1]", p.alpha)));
            }
        }
        if let (Some(l), Some(d)) = (&self.ladder, &self.data) {
            if l.teachers.is_empty() {
                return Err(invalid("ladder.teachers", "ladder is empty"));
            }
            validate_specs(&l.teachers, &d.task).map_err(|e| invalid("ladder.teachers", e))?;
        }
        if let Some(a) = &self.ablate {
            for m in &a.modes {
                m.parse::<PlanMode>().map_err(|e| invalid("ablate.modes", e))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
[model]
model_dim = 32
num_heads = 4
num_layers = 2

[partition]
case = "case2"

[mechanism]
kind = "xattn"

[plan]
mode = "scout"

[optimizer]
lr = 1e-3
steps = 10

[data.task]
name = "mod_add"
kind = { type = "mod_add", modulus = 7 }

[seed]
root = 3
"#;

    #[test]
    fn full_config_validates_for_train() {
        let c = RunConfig::parse(FULL).unwrap();
        c.validate(Command::Train).unwrap();
        assert_eq!(c.mechanism().unwrap().iterations, 3);
        assert_eq!(c.backbone_config().unwrap().vocab_size, 9);
    }

    #[test]
    fn round_trip_is_identical() {
        let c = RunConfig::parse(FULL).unwrap();
        let again = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.to_toml(), again.to_toml());
    }

    #[test]
    fn unknown_key_names_its_path() {
        let text = FULL.replace("num_layers = 2", "num_layers = 2\nwidth = 3");
        match RunConfig::parse(&text) {
            Err(Error::Validation { path, message }) => {
                assert_eq!(path, "model.width");
                assert!(message.contains("width"), "{message}");
            }
            other => panic!("expected a validation error, got {other:?}"),
        }
    }

    #[test]
    fn missing_section_is_named() {
        let text = FULL.replace("[model]", "[ignored]").replace("[ignored]\n", "");
        let text = text.replace("model_dim = 32\nnum_heads = 4\nnum_layers = 2\n", "");
        let c = RunConfig::parse(&text).unwrap();
        let err = c.validate(Command::Pretrain).unwrap_err();
        assert!(matches!(&err, Error::Validation { path, .. } if path == "model"), "{err}");
    }

    #[test]
    fn bad_mode_lists_all_modes() {
        let c = RunConfig::parse(&FULL.replace("\"scout\"", "\"magic\"")).unwrap();
        let msg = c.validate(Command::Train).unwrap_err().to_string();
        for m in PlanMode::ALL {
            assert!(msg.contains(m.name()), "{msg}");
        }
    }
}
