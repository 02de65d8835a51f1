//! Experiment configuration: presets, TOML files and dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{SampleConfig, View};
use crate::decoder::DecodeConfig;
use crate::error::{Error, PathContext, Result};
use crate::fmindex::IndexConfig;
use crate::ranker::{IdentifierScoring, LossConfig, LtrConfig};
use crate::seqmodel::{Arch, ModelConfig};
use crate::synth::SynthConfig;
use crate::vocab::{Granularity, VocabConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Desk,
    Paper,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Mode::Desk),
            "paper" => Ok(Mode::Paper),
            _ => Err(Error::Config(format!("unknown mode `{s}` (expected desk or paper)"))),
        }
    }
}

/// Which identifier views the generator is trained and decoded on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BaseModel {
    /// Titles, substrings and pseudo-queries.
    #[default]
    Multiview,
    /// Body substrings only.
    Substring,
}

impl BaseModel {
    pub fn views(self) -> Vec<View> {
        match self {
            BaseModel::Multiview => View::ALL.to_vec(),
            BaseModel::Substring => vec![View::Substring],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub train_queries: PathBuf,
    pub train_qrels: PathBuf,
    pub heldout_queries: PathBuf,
    pub heldout_qrels: PathBuf,
    pub vocab: PathBuf,
    pub index: PathBuf,
    pub gen_checkpoint: PathBuf,
    pub rank_checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

impl Paths {
    fn or_out(&self, p: &Path, name: &str) -> PathBuf {
        if p.as_os_str().is_empty() {
            self.out_dir().join(name)
        } else {
            p.to_path_buf()
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        if self.out_dir.as_os_str().is_empty() {
            PathBuf::from("out")
        } else {
            self.out_dir.clone()
        }
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.or_out(&self.vocab, "vocab.json")
    }

    pub fn index_path(&self) -> PathBuf {
        self.or_out(&self.index, "index.fmi")
    }

    pub fn gen_checkpoint_path(&self) -> PathBuf {
        self.or_out(&self.gen_checkpoint, "generate.ckpt")
    }

    pub fn rank_checkpoint_path(&self) -> PathBuf {
        self.or_out(&self.rank_checkpoint, "rank.ckpt")
    }
}

/// Model shape; the vocabulary size and seed come from the vocab and experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub arch: Arch,
    pub max_seq_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 64,
            arch: Arch::Gru,
            max_seq_len: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Also train on one pseudo-query per passage as the query for that passage.
    pub index_pairs: bool,
    /// Learning rate decays linearly to `lr * final_lr_scale` over the phase.
    pub final_lr_scale: f64,
}

impl Default for GenTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            lr: 1e-2,
            index_pairs: true,
            final_lr_scale: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub base: BaseModel,
    pub paths: Paths,
    pub vocab: VocabConfig,
    pub sample: SampleConfig,
    pub index: IndexConfig,
    pub model: ModelShape,
    pub decode: DecodeConfig,
    pub generate: GenTrainConfig,
    pub rank: LtrConfig,
    pub synth: SynthConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Mode::Desk)
    }
}

impl ExperimentConfig {
    pub fn preset(mode: Mode) -> Self {
        let desk = Self {
            mode,
            seed: 0,
            base: BaseModel::Multiview,
            paths: Paths::default(),
            vocab: VocabConfig {
                granularity: Granularity::Word,
                min_count: 1,
            },
            sample: SampleConfig {
                substring_len: (3, 8),
                samples_per_view: 1,
                pseudo_query_fallback: false,
            },
            index: IndexConfig::default(),
            model: ModelShape::default(),
            decode: DecodeConfig {
                beam: 15,
                max_len: 12,
                length_penalty: 0.0,
                views: View::ALL.to_vec(),
            },
            generate: GenTrainConfig::default(),
            rank: LtrConfig::default(),
            synth: SynthConfig::default(),
        };
        match mode {
            Mode::Desk => desk,
            Mode::Paper => Self {
                sample: SampleConfig {
                    substring_len: (10, 40),
                    ..desk.sample
                },
                model: ModelShape {
                    max_seq_len: 256,
                    ..desk.model
                },
                decode: DecodeConfig {
                    max_len: 40,
                    ..desk.decode
                },
                generate: GenTrainConfig {
                    lr: 1e-5,
                    ..desk.generate
                },
                rank: LtrConfig {
                    loss: LossConfig::paper(),
                    lr: 1e-5,
                    ..desk.rank
                },
                ..desk
            },
        }
    }

    /// Preset for `mode` (or the file's own mode), merged with the file, then `overrides`.
    pub fn load(path: Option<&Path>, mode: Option<Mode>, overrides: &[String]) -> Result<Self> {
        let file: Option<toml::Value> = match path {
            Some(p) => {
                let raw = std::fs::read_to_string(p).at(p)?;
                Some(toml::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)
            }
            None => None,
        };
        let file_mode = file
            .as_ref()
            .and_then(|v| v.get("mode"))
            .and_then(|m| m.as_str())
            .map(str::parse)
            .transpose()?;
        let mode = mode.or(file_mode).unwrap_or_default();
        let mut value = toml::Value::try_from(Self::preset(mode)).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(f) = file {
            merge(&mut value, f, "")?;
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        if let Some(t) = value.as_table_mut() {
            t.insert("mode".into(), toml::Value::try_from(mode).map_err(|e| Error::Config(e.to_string()))?);
        }
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.rank.loss.validate()?;
        let (lo, hi) = self.sample.substring_len;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("bad substring_len range [{lo}, {hi}]")));
        }
        if self.decode.beam == 0 || self.decode.max_len == 0 {
            return Err(Error::Config("beam and max_len must be at least 1".into()));
        }
        if self.decode.views.is_empty() {
            return Err(Error::Config("decode.views is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.generate.final_lr_scale) {
            return Err(Error::Config("generate.final_lr_scale must lie in [0, 1]".into()));
        }
        if self.generate.batch_size == 0 || self.rank.batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.model.embed_dim,
            hidden_dim: self.model.hidden_dim,
            arch: self.model.arch,
            max_seq_len: self.model.max_seq_len,
            seed: self.seed,
        }
    }

    /// Decode settings with the views implied by `base`.
    pub fn decode_config(&self) -> DecodeConfig {
        let mut d = self.decode.clone();
        if self.base != BaseModel::Multiview {
            d.views = self.base.views();
        }
        d
    }

    pub fn ltr_config(&self) -> LtrConfig {
        LtrConfig {
            seed: self.seed,
            ..self.rank.clone()
        }
    }

    pub fn scoring(&self) -> IdentifierScoring {
        self.rank.loss.scoring
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Value, over: toml::Value, path: &str) -> Result<()> {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => return Err(Error::Config(format!("unknown config key `{sub}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Applies `a.b.c=value`; the value is parsed as a TOML literal, else taken as a string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let value = parse_literal(raw.trim());
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a table", parts[..i].join("."))))?;
        let slot = table
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(Error::Config(format!("empty config key in `{spec}`")))
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
