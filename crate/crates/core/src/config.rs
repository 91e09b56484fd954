//! Run configuration: one JSON file describing the dataset, the strategy
//! descriptors (backend, scorer, NLI, tokenizers), prompting, interventions
//! and execution knobs. CLI flags override individual keys after loading.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::hex;
use crate::error::{Error, Result};
use crate::gateway::RetryPolicy;
use crate::intervention::InterventionKind;
use crate::prompt::InstructionSpace;
use crate::stats::SuccessDefinition;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Display name used in reports and for per-dataset defaults (e.g. "NQ").
    pub name: String,
    /// MRQA-format file, gzip optional.
    pub path: PathBuf,
    /// Training split for demonstrations and prompt search.
    #[serde(default)]
    pub training_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PromptConfig {
    /// Use this instruction for every open-book prompt.
    Fixed { instruction: String },
    /// Search the instruction space on a held-out training subset and use
    /// the winner.
    Search {
        #[serde(default = "default_search_subset")]
        subset_size: usize,
        #[serde(default)]
        space: Option<InstructionSpace>,
    },
    /// Load a complete open-book template (instruction plus demonstrations)
    /// from a JSON file.
    File { path: PathBuf },
}

fn default_search_subset() -> usize {
    3000
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShotsConfig {
    /// Demonstrations for the closed-book probe; defaults per dataset.
    #[serde(default)]
    pub closed_book: Option<usize>,
    /// Open-book demonstrations; zero means the plain baseline condition,
    /// anything more is the ICL condition.
    #[serde(default)]
    pub open_book: usize,
    /// Models with long context windows default to eight shots everywhere.
    #[serde(default)]
    pub long_context_model: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterventionConfig {
    pub kind: InterventionKind,
    #[serde(default = "default_mask_passes")]
    pub max_passes: usize,
    #[serde(default)]
    pub single_pass: bool,
    #[serde(default)]
    pub first_occurrence_only: bool,
    /// Tokenizer strategy descriptor for masking.
    #[serde(default = "default_tokenizer")]
    pub tokenizer: serde_json::Value,
}

fn default_mask_passes() -> usize {
    16
}

fn default_tokenizer() -> serde_json::Value {
    serde_json::json!({"kind": "whitespace"})
}

impl InterventionConfig {
    pub fn mask_options(&self) -> crate::intervention::MaskOptions {
        crate::intervention::MaskOptions {
            max_passes: self.max_passes,
            single_pass: self.single_pass,
            first_occurrence_only: self.first_occurrence_only,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    /// Backend strategy descriptor, e.g. {"kind": "http", "base_url": ...,
    /// "model_id": ...} or {"kind": "scripted", "path": ...}.
    pub backend: serde_json::Value,
    /// Scorer strategy descriptor; defaults to normalized exact match.
    #[serde(default = "default_scorer")]
    pub scorer: serde_json::Value,
    /// NLI strategy descriptor, e.g. {"kind": "remote", "url": ...}.
    pub nli: serde_json::Value,
    pub prompt: PromptConfig,
    #[serde(default)]
    pub shots: ShotsConfig,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    #[serde(default)]
    pub interventions: Vec<InterventionConfig>,
    /// Success definition for the significance test (the failure-likelihood
    /// delta always compares retention rates).
    #[serde(default = "default_bias_success")]
    pub bias_success: SuccessDefinition,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_scorer() -> serde_json::Value {
    serde_json::json!({"kind": "exact"})
}

fn default_max_new_tokens() -> u32 {
    64
}

fn default_bias_success() -> SuccessDefinition {
    SuccessDefinition::CorrectUpdate
}

fn default_parallelism() -> usize {
    4
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(RunConfig, PathBuf)> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok((config, base_dir))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.name.trim().is_empty() {
            return Err(Error::config("dataset.name must not be empty"));
        }
        if self.parallelism == 0 {
            return Err(Error::config("parallelism must be at least 1"));
        }
        let needs_training = self.shots.open_book > 0
            || self.shots.closed_book.is_none_or(|k| k > 0)
            || matches!(self.prompt, PromptConfig::Search { .. });
        if needs_training && self.dataset.training_path.is_none() {
            return Err(Error::config(
                "dataset.training_path is required for demonstrations and prompt search \
(set shots.closed_book to 0 and prompt.mode to \"fixed\" to run without one)",
            ));
        }
        if matches!(self.prompt, PromptConfig::File { .. }) && self.shots.open_book > 0 {
            return Err(Error::config(
                "prompt.mode \"file\" carries its own demonstrations; shots.open_book must be 0",
            ));
        }
        for intervention in &self.interventions {
            if intervention.max_passes == 0 {
                return Err(Error::config("intervention max_passes must be at least 1"));
            }
        }
        Ok(())
    }

    /// The model identifier generation requests carry: the backend
    /// descriptor's model_id, or a placeholder for scripted backends.
    pub fn model_id(&self) -> String {
        self.backend
            .get("model_id")
            .and_then(|v| v.as_str())
            .unwrap_or("scripted")
            .to_string()
    }

    pub fn generation_settings(&self) -> crate::prompt::GenerationSettings {
        crate::prompt::GenerationSettings {
            model_id: self.model_id(),
            max_new_tokens: self.max_new_tokens,
            stop_sequences: self.stop_sequences.clone(),
        }
    }

    /// Content hash of the full resolved config, for manifests and stage
    /// keys.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&bytes))
    }
}

/// Digest of any JSON-serializable key document; stage resume keys are built
/// from these.
pub fn key_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("key serializes");
    hex(&Sha256::digest(&bytes))
}
