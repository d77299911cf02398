//! Declarative experiment configuration.
//!
//! One TOML file describes an entire experiment: the synthetic language,
//! the corpus draw, the model, the optimizer schedule, the sampler, and
//! the eval protocols. Every field has a default and `print-config`
//! emits the full effective file, so experiments stay diffable.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use codeclm::codec::CodecSpec;
use codeclm::infer::SamplerConfig;
use codeclm::layout::TtsVariant;
use codeclm::model::{ModelConfig, PosEncoding};
use codeclm::pipeline::{EditEvalConfig, SplitSizes, TtsEvalConfig};
use codeclm::toy::{CorpusConfig, ToyLanguageSpec};
use codeclm::train::TrainConfig;

/// Errors split by exit code: bad flags or config values are usage
/// errors (exit 2), everything that fails after a valid setup is a
/// runtime abort (exit 3).
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Runtime(msg) => write!(f, "runtime error: {msg}"),
        }
    }
}

pub fn config_err(e: impl fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

pub fn runtime_err(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Numeric precision the model runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

/// Synthesis prompt placement, named for config files and flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum VariantName {
    Middle,
    Prefix,
    Suffix,
}

impl VariantName {
    pub fn to_variant(self) -> TtsVariant {
        match self {
            VariantName::Middle => TtsVariant::Middle,
            VariantName::Prefix => TtsVariant::Prefix,
            VariantName::Suffix => TtsVariant::Suffix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub alphabet_size: u32,
    pub frames_per_symbol: usize,
    pub num_speakers: u32,
}

impl Default for ToySection {
    fn default() -> Self {
        ToySection { alphabet_size: 16, frames_per_symbol: 2, num_speakers: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub num_codebooks: usize,
    pub vocab_size: u32,
    pub frame_rate_hz: u32,
}

impl Default for CodecSection {
    fn default() -> Self {
        CodecSection { num_codebooks: 4, vocab_size: 256, frame_rate_hz: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub min_symbols: usize,
    pub max_symbols: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { train: 2048, val: 128, test: 128, min_symbols: 3, max_symbols: 12, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_seq_len: usize,
    pub pos_encoding: PosEncoding,
    pub dtype: Dtype,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            layers: 2,
            dim: 128,
            heads: 4,
            ffn_mult: 4,
            max_seq_len: 256,
            pos_encoding: PosEncoding::Rotary,
            dtype: Dtype::F32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Units of each held-out utterance used as the synthesis prompt.
    pub prompt_units: usize,
    pub variant: VariantName,
    /// Extra generation columns beyond the reference length.
    pub budget_slack: usize,
    pub item_seed: u64,
    /// Editing tasks scored alongside synthesis; 0 skips them.
    pub edit_items: usize,
    pub edit_budget_slack: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            prompt_units: 2,
            variant: VariantName::Middle,
            budget_slack: 8,
            item_seed: 99,
            edit_items: 32,
            edit_budget_slack: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// Per-arm optimizer steps; both arms get the identical budget.
    pub steps: u64,
    pub items: usize,
    pub item_seed: u64,
    pub budget_slack: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection { steps: 4000, items: 48, item_seed: 1234, budget_slack: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct WorkbenchConfig {
    pub toy: ToySection,
    pub codec: CodecSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

impl WorkbenchConfig {
    /// Defaults, overlaid with the file when one is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(WorkbenchConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(config_err)
    }

    pub fn codec_spec(&self) -> Result<CodecSpec, CliError> {
        CodecSpec::new(self.codec.num_codebooks, self.codec.vocab_size, self.codec.frame_rate_hz)
            .map_err(config_err)
    }

    pub fn toy(&self) -> Result<ToyLanguageSpec, CliError> {
        ToyLanguageSpec::new(
            self.toy.alphabet_size,
            self.toy.frames_per_symbol,
            self.toy.num_speakers,
            self.codec_spec()?,
        )
        .map_err(config_err)
    }

    /// Model shape with the vocab slots implied by the language.
    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let cfg = ModelConfig {
            layers: self.model.layers,
            dim: self.model.dim,
            heads: self.model.heads,
            ffn_mult: self.model.ffn_mult,
            text_vocab: self.toy.alphabet_size,
            speaker_dim: self.toy.num_speakers,
            codec: self.codec_spec()?,
            max_seq_len: self.model.max_seq_len,
            pos_encoding: self.model.pos_encoding,
            seed: self.model.seed,
        };
        cfg.validate().map_err(config_err)?;
        Ok(cfg)
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            size: self.data.train,
            min_symbols: self.data.min_symbols,
            max_symbols: self.data.max_symbols,
        }
    }

    pub fn split_sizes(&self) -> SplitSizes {
        SplitSizes { train: self.data.train, val: self.data.val, test: self.data.test }
    }

    pub fn tts_eval(&self) -> TtsEvalConfig {
        TtsEvalConfig {
            prompt_units: self.eval.prompt_units,
            variant: self.eval.variant.to_variant(),
            sampler: self.sampler.clone(),
            budget_slack: self.eval.budget_slack,
            item_seed: self.eval.item_seed,
        }
    }

    pub fn edit_eval(&self) -> EditEvalConfig {
        EditEvalConfig { sampler: self.sampler.clone(), budget_slack: self.eval.edit_budget_slack }
    }

    /// Checks every derived object once so commands can assume a valid
    /// setup afterwards.
    pub fn validate(&self) -> Result<(), CliError> {
        self.toy()?;
        let model = self.model_config()?;
        self.train.validate(model.codec.num_codebooks).map_err(config_err)?;
        self.sampler.validate().map_err(config_err)?;
        if self.data.min_symbols == 0 || self.data.min_symbols > self.data.max_symbols {
            return Err(CliError::Config(format!(
                "symbol length range {}..={} is empty",
                self.data.min_symbols, self.data.max_symbols
            )));
        }
        Ok(())
    }
}
