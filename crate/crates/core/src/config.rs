//! Run configuration: one TOML document layered over a named preset, with
//! `section.key=value` overrides on top.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::corpus::DEFAULT_DEDUP_THRESHOLD;
use crate::decoding::{BeamConfig, DEFAULT_BEAM, DEFAULT_MAX_LEN};
use crate::knowledge::{HttpPolicy, DEFAULT_MAX_PER_ENTITY};
use crate::model::ModelConfig;
use crate::training::TrainConfig;
use crate::{Error, Result};

/// Environment variable naming a config file when `--config` is absent.
pub const CONFIG_ENV: &str = "PUNCHLINE_CONFIG";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub dedup_threshold: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { dedup_threshold: DEFAULT_DEDUP_THRESHOLD }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnowledgeConfig {
    pub max_per_entity: usize,
    pub in_flight: usize,
    pub linker_url: String,
    pub sparql_url: String,
    pub http: HttpPolicy,
}

impl Default for KnowledgeConfig {
    fn default() -> Self {
        Self {
            max_per_entity: DEFAULT_MAX_PER_ENTITY,
            in_flight: 4,
            linker_url: "https://tagme.d4science.org/tagme/tag".into(),
            sparql_url: "https://query.wikidata.org/sparql".into(),
            http: HttpPolicy::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    /// Target size, special tokens and byte alphabet included.
    pub vocab_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    pub max_len: usize,
    pub length_normalize: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam: DEFAULT_BEAM, max_len: DEFAULT_MAX_LEN, length_normalize: true }
    }
}

impl DecodeConfig {
    pub fn beam_config(&self) -> BeamConfig {
        BeamConfig { beam: self.beam, max_len: self.max_len, length_normalize: self.length_normalize }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Root of every random stream in a run.
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    pub workers: usize,
    pub corpus: CorpusConfig,
    pub knowledge: KnowledgeConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub decode: DecodeConfig,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { vocab_size: 2000 }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        // Desk runs are bounded by steps; the epoch cap would bind first on tiny corpora.
        let pretrain = TrainConfig { max_steps: Some(500), max_epochs: 100_000, ..TrainConfig::default() };
        let finetune = TrainConfig { max_steps: Some(200), max_epochs: 100_000, ..TrainConfig::default() };
        match preset {
            Preset::Desk => Self {
                preset,
                seed: 0,
                workers: 0,
                corpus: CorpusConfig::default(),
                knowledge: KnowledgeConfig::default(),
                tokenizer: TokenizerConfig { vocab_size: 2000 },
                model: ModelConfig::desk(),
                pretrain,
                finetune,
                decode: DecodeConfig::default(),
            },
            Preset::Paper => Self {
                tokenizer: TokenizerConfig { vocab_size: 25000 },
                model: ModelConfig::paper(),
                pretrain: TrainConfig::default(),
                finetune: TrainConfig::default(),
                ..Self::preset(Preset::Desk)
            },
        }
    }

    /// Preset named in `document` (desk if absent), overlaid with the
    /// document and then with each `key.path=value` override. Train seeds
    /// follow the top-level seed.
    pub fn resolve(document: Option<&str>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut doc: Value = match document {
            Some(text) => text.parse::<toml::Table>().map(Value::Table).map_err(|e| Error::Config(e.to_string()))?,
            None => Value::Table(Default::default()),
        };
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} lacks '='")))?;
            set_path(&mut doc, key.trim(), parse_scalar(raw.trim()))?;
        }
        if let Some(seed) = seed {
            set_path(&mut doc, "seed", Value::Integer(seed as i64))?;
        }
        let preset = match doc.get("preset") {
            Some(Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => Preset::Desk,
        };
        let mut base = Value::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, doc);
        let mut config: RunConfig = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.pretrain.seed = config.seed;
        config.finetune.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides, seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.decode.beam == 0 || self.decode.max_len == 0 {
            return Err(Error::Config("decode.beam and decode.max_len must be positive".into()));
        }
        if self.tokenizer.vocab_size < 260 {
            return Err(Error::Config("tokenizer.vocab_size must cover the 260 base tokens".into()));
        }
        if !(0.0..=1.0).contains(&self.corpus.dedup_threshold) {
            return Err(Error::Config("corpus.dedup_threshold must lie in [0, 1]".into()));
        }
        ModelConfig { vocab_size: 1, ..self.model.clone() }.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Integers, floats and booleans as themselves, anything else as a string.
fn parse_scalar(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| Error::Config(format!("{key}: {part} is not a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table.entry(part.to_string()).or_insert_with(|| Value::Table(Default::default()));
    }
    Err(Error::Config("empty override key".into()))
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
