//! Experiment configuration.
//!
//! A config is a single TOML file. Every key is optional; missing keys take
//! the values printed by `seqlabel --print-defaults`. The `[data]` and
//! `[model]` tables patch the synthetic preset and the size preset field by
//! field.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use seqlabel_core::data::SplitMode;
use seqlabel_core::methods::STANDARD_LWAN_HEADS;
use seqlabel_core::{
    AttentionScheme, DatasetSpec, Decoding, DescriptorScheme, Level, MethodKind, MethodOptions, ModelConfig,
    SizePreset, TrainConfig,
};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Train, dev and test shares.
    pub fractions: [f64; 3],
    pub mode: SplitMode,
    /// Shuffle seed for `mode = "random"`.
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fractions: [0.8, 0.1, 0.1],
            mode: SplitMode::Chronological,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AblationGrid {
    /// Encoder+Head, single-step T5Enc and the three decoder attention schemes.
    Attention,
    /// T5Enc with each decoder depth in `depths`.
    Depth,
}

/// Decoder depths compared by the depth ablation.
pub const DEPTH_GRID: [usize; 4] = [1, 4, 6, 12];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub grid: AblationGrid,
    pub depths: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            grid: AblationGrid::Attention,
            depths: DEPTH_GRID.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FisherConfig {
    pub alpha: f64,
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self { alpha: 0.001 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Synthetic preset name, a directory written by `generate-data`, or a
    /// JSONL corpus with `labels.tsv` and `vocab.txt` beside it.
    pub dataset: String,
    pub level: Level,
    pub size: SizePreset,
    pub scheme: DescriptorScheme,
    pub out: PathBuf,
    pub methods: Vec<MethodKind>,
    /// Field overrides for a synthetic preset.
    pub data: toml::Table,
    pub split: SplitConfig,
    /// Field overrides for the size preset.
    pub model: toml::Table,
    pub train: TrainConfig,
    pub options: MethodOptions,
    pub ablation: AblationConfig,
    pub fisher: FisherConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: "planted".into(),
            level: Level::L2,
            size: SizePreset::Small,
            scheme: DescriptorScheme::Pseudo,
            out: PathBuf::from("runs"),
            methods: vec![
                MethodKind::EncoderHead,
                MethodKind::Lwan { heads: 4 },
                MethodKind::Seq2Seq {
                    decoding: Decoding::Greedy,
                },
                MethodKind::T5Enc {
                    scheme: AttentionScheme::Causal,
                },
            ],
            data: toml::Table::new(),
            split: SplitConfig::default(),
            model: toml::Table::new(),
            train: TrainConfig::default(),
            options: MethodOptions::default(),
            ablation: AblationConfig::default(),
            fisher: FisherConfig::default(),
        }
    }
}

/// Where the corpus comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(DatasetSpec),
    Directory(PathBuf),
    Jsonl(PathBuf),
}

/// Replaces fields of `base` with the entries of `patch`, rejecting keys
/// that `base` does not have.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: &toml::Table, section: &str) -> Result<T> {
    let mut table = toml::Table::try_from(base).map_err(|e| CliError::Config(format!("[{section}]: {e}")))?;
    for (key, value) in patch {
        if !table.contains_key(key) {
            return Err(CliError::Config(format!("unknown key `{key}` in [{section}]")));
        }
        table.insert(key.clone(), value.clone());
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Config(format!("[{section}]: {e}")))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|source| CliError::ConfigFile {
            path: path.to_owned(),
            source,
        })
    }

    /// The default config with the preset tables spelled out, as TOML.
    pub fn defaults_toml() -> String {
        let mut cfg = Self::default();
        let spec = DatasetSpec::preset(&cfg.dataset).expect("default dataset is a preset");
        cfg.data = toml::Table::try_from(&spec).expect("spec serialises");
        let mut model = toml::Table::try_from(ModelConfig::preset(cfg.size, 0)).expect("model serialises");
        model.remove("vocab_size");
        cfg.model = model;
        toml::to_string_pretty(&cfg).expect("config serialises")
    }

    pub fn source(&self) -> Result<DataSource> {
        if let Some(spec) = DatasetSpec::preset(&self.dataset) {
            return Ok(DataSource::Synthetic(overlay(&spec, &self.data, "data")?));
        }
        if !self.data.is_empty() {
            return Err(CliError::Config(format!(
                "[data] overrides only apply to synthetic presets, but dataset is {:?}",
                self.dataset
            )));
        }
        let path = PathBuf::from(&self.dataset);
        if path.is_dir() {
            Ok(DataSource::Directory(path))
        } else if path.is_file() {
            Ok(DataSource::Jsonl(path))
        } else {
            Err(CliError::Config(format!(
                "dataset {:?} is neither a preset (uklex_like, planted, separable) nor an existing path",
                self.dataset
            )))
        }
    }

    /// Model shape for the size preset with `[model]` overrides applied.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        if self.model.contains_key("vocab_size") {
            return Err(CliError::Config("[model] vocab_size is taken from the corpus vocabulary".into()));
        }
        let cfg = overlay(&ModelConfig::preset(self.size, vocab_size), &self.model, "model")?;
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Checks everything that does not need the corpus.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CliError::Config(m));
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.source()?;
        self.model_config(1)?;
        let f = self.split.fractions;
        if f.iter().any(|x| !(*x > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return fail(format!("split fractions {f:?} must be positive and sum to 1"));
        }
        if !(self.options.threshold > 0.0 && self.options.threshold < 1.0) {
            return fail(format!("options.threshold {} must lie in (0, 1)", self.options.threshold));
        }
        if self.options.max_gen_len == 0 {
            return fail("options.max_gen_len must be positive".into());
        }
        if !(self.fisher.alpha > 0.0 && self.fisher.alpha < 1.0) {
            return fail(format!("fisher.alpha {} must lie in (0, 1)", self.fisher.alpha));
        }
        if self.ablation.depths.is_empty() || self.ablation.depths.contains(&0) {
            return fail("ablation.depths must be a non-empty list of positive depths".into());
        }
        let mut seen = std::collections::HashSet::new();
        for m in &self.methods {
            if !seen.insert(m) {
                return fail(format!("method {m} is listed twice"));
            }
            if let MethodKind::Lwan { heads } = m {
                if !m.is_standard_config() {
                    log::warn!("LWAN with {heads} heads is outside the usual sweep {STANDARD_LWAN_HEADS:?}");
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over every setting that can change results. The output
    /// directory is excluded; preset tables are hashed in resolved form so
    /// spelling out a default does not change the hash.
    pub fn hash(&self) -> Result<String> {
        let source = match self.source()? {
            DataSource::Synthetic(spec) => serde_json::json!({ "synthetic": spec }),
            DataSource::Directory(p) | DataSource::Jsonl(p) => serde_json::json!({ "path": p }),
        };
        let canonical = serde_json::json!({
            "dataset": source,
            "level": self.level,
            "size": self.size,
            "scheme": self.scheme,
            "methods": self.methods,
            "split": self.split,
            "model": overlay(&ModelConfig::preset(self.size, 0), &self.model, "model")?,
            "train": self.train,
            "options": self.options,
            "ablation": self.ablation,
            "fisher": self.fisher,
        });
        Ok(sha256_hex(canonical.to_string().as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
