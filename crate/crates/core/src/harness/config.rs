use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tasks::TaskSpec;
use crate::allocation::Target;
use crate::bilevel::{AdamParams, BilevelConfig, OptimizerMode, Schedule};
use crate::error::{Error, Result};
use crate::lora_moe::{MoeSettings, ScaleMode};

/// Environment variable that overrides the configured output directory.
pub const OUTPUT_ENV: &str = "GUILOMO_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTransformerConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub lora_targets: Vec<Target>,
    /// Seed of the frozen base weights and embeddings.
    pub base_seed: u64,
}

impl Default for ToyTransformerConfig {
    fn default() -> Self {
        ToyTransformerConfig {
            layers: 4,
            d_model: 32,
            d_ff: 64,
            heads: 4,
            vocab: 32,
            max_seq: 32,
            lora_targets: Target::ALL.to_vec(),
            base_seed: 0,
        }
    }
}

impl ToyTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.vocab == 0 || self.max_seq == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.d_ff <= self.d_model {
            return Err(Error::Config(format!(
                "d_ff ({}) must exceed d_model ({})",
                self.d_ff, self.d_model
            )));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// Adapted targets, sorted and deduplicated.
    pub fn targets(&self) -> Vec<Target> {
        let mut t = self.lora_targets.clone();
        t.sort();
        t.dedup();
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeConfig {
    pub routing_k: usize,
    pub scale_mode: ScaleMode,
    pub alpha: f64,
    /// Balance-loss coefficient `c_B`.
    pub c_b: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            routing_k: 2,
            scale_mode: ScaleMode::AlphaOverR,
            alpha: 16.0,
            c_b: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer_mode: OptimizerMode,
    pub adam: AdamParams,
    pub schedule: Schedule,
    /// Stop after the first epoch whose eval accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            lr: 3e-4,
            batch_size: 16,
            optimizer_mode: OptimizerMode::Adaptive,
            adam: BilevelConfig::default().model_adam,
            schedule: Schedule::Cosine,
            stop_at_accuracy: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr >= 0.0) {
            return Err(Error::Config("fine-tune batch_size must be >= 1 and lr >= 0".into()));
        }
        self.adam.validate()
    }
}

/// Where the final model's allocation comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AllocationSource {
    /// The plan extracted from a search.
    #[default]
    Guilomo,
    Uniform { experts: usize, rank: usize },
    /// Uniform expert count and near-uniform ranks matching the searched
    /// plan's total rank and mean expert count.
    UniformMatched,
    MolaGroup { groups: [usize; 4], rank: usize },
    NormalER { expert_budget: usize, rank_budget: usize },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ToyTransformerConfig,
    pub task: TaskSpec,
    pub bilevel: BilevelConfig,
    pub moe: MoeConfig,
    pub allocation: AllocationSource,
    pub finetune: FinetuneConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ToyTransformerConfig::default(),
            task: TaskSpec::default(),
            bilevel: BilevelConfig::default(),
            moe: MoeConfig::default(),
            allocation: AllocationSource::default(),
            finetune: FinetuneConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// Reads a `.toml` or `.json` file; other extensions are tried as TOML
    /// first, then JSON.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&text)?,
            Some("toml") => Self::from_toml_str(&text)?,
            _ => Self::from_toml_str(&text).or_else(|_| Self::from_json_str(&text))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate(self.model.vocab, self.model.max_seq)?;
        self.bilevel.validate()?;
        self.finetune.validate()?;
        self.moe_settings().validate()?;
        if !(self.moe.c_b >= 0.0) {
            return Err(Error::Config("c_b must be non-negative".into()));
        }
        if self.model.lora_targets.is_empty() {
            return Err(Error::Config("lora_targets must name at least one matrix".into()));
        }
        if let AllocationSource::File { path } = &self.allocation {
            if !path.exists() {
                return Err(Error::Config(format!("plan file {} does not exist", path.display())));
            }
        }
        Ok(())
    }

    pub fn moe_settings(&self) -> MoeSettings {
        MoeSettings {
            e_max: self.bilevel.e_max,
            r_max: self.bilevel.r_max,
            routing_k: self.moe.routing_k,
            scale_mode: self.moe.scale_mode,
            alpha: self.moe.alpha,
        }
    }

    /// Output directory after applying the environment override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree() {
        let toml_src = r#"
            output_dir = "out"
            [model]
            layers = 2
            lora_targets = ["q", "down"]
            [task]
            family = "copy"
            k = 4
            [bilevel]
            optimizer_mode = "plain_sgd"
            steps = 5
            [allocation]
            kind = "uniform"
            experts = 2
            rank = 4
        "#;
        let a = RunConfig::from_toml_str(toml_src).unwrap();
        a.validate().unwrap();
        let b = RunConfig::from_json_str(&a.to_json().unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.model.targets(), vec![Target::Q, Target::Down]);
        assert_eq!(a.allocation, AllocationSource::Uniform { experts: 2, rank: 4 });
    }

    #[test]
    fn unknown_fields_and_bad_models_are_rejected() {
        assert!(RunConfig::from_toml_str("[model]\nlayerz = 3").is_err());
        let cfg = RunConfig {
            model: ToyTransformerConfig {
                d_ff: 16,
                ..ToyTransformerConfig::default()
            },
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let missing = RunConfig {
            allocation: AllocationSource::File {
                path: "/nonexistent/plan.json".into(),
            },
            ..RunConfig::default()
        };
        assert!(missing.validate().is_err());
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        assert_ne!(RunConfig::default().hash(), {
            let mut c = RunConfig::default();
            c.bilevel.seed = 1;
            c.hash()
        });
    }
}
