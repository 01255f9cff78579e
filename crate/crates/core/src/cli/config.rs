//! Experiment configuration: a TOML file layered over a built-in profile.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CorpusSource, MarkovDnaParams};
use crate::model::ModelConfig;
use crate::tokenize::Scheme;
use crate::train::{member_seeds, MaskPolicy, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    /// Ensemble size N.
    pub members: usize,
    /// Base seed; member `i` uses a seed derived from this and `i`.
    pub weight_seed: u64,
    /// Drives window order, masking and probe selection.
    pub data_seed: u64,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    pub scheme: Scheme,
    /// Total BPE vocabulary including the special tokens.
    pub vocab_size: usize,
    /// k-mer length.
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub max_seq_len: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub sequences_per_epoch: usize,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub mask_policy: MaskPolicy,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Held-out windows, one probe each.
    pub probes: usize,
    /// Probes used for the Fisher estimate (the first ones); 0 means all.
    pub fisher_probes: usize,
    pub p_grid: Vec<f64>,
    pub k_grid: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub corpus: CorpusSource,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub analysis: AnalysisSection,
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        let desk = profile == Profile::Desk;
        ExperimentConfig {
            experiment: ExperimentSection {
                name: "grammar-bpe".into(),
                members: if desk { 3 } else { 5 },
                weight_seed: 1,
                data_seed: 7,
                output_dir: PathBuf::from("runs/grammar-bpe"),
            },
            corpus: CorpusSource::SyntheticGrammarText { seed: 11, n_docs: if desk { 24_000 } else { 2_000_000 } },
            tokenizer: TokenizerSection { scheme: Scheme::Bpe, vocab_size: 4096, k: 6 },
            model: if desk {
                ModelSection { max_seq_len: 64, model_dim: 64, n_layers: 2, n_heads: 4, ffn_dim: 256, dropout: 0.0 }
            } else {
                ModelSection { max_seq_len: 512, model_dim: 768, n_layers: 12, n_heads: 12, ffn_dim: 3072, dropout: 0.1 }
            },
            train: TrainSection {
                epochs: if desk { 4 } else { 10 },
                sequences_per_epoch: if desk { 8192 } else { 1_000_000 },
                batch_size: if desk { 16 } else { 32 },
                mask_rate: 0.15,
                mask_policy: MaskPolicy::Bert,
                learning_rate: if desk { 1e-3 } else { 1e-4 },
                warmup_fraction: 0.01,
                clip_norm: 0.5,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.01,
            },
            analysis: AnalysisSection {
                probes: if desk { 10_000 } else { 100_000 },
                fisher_probes: if desk { 2000 } else { 0 },
                p_grid: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
                k_grid: vec![1, 3, 5, 10, 20, 50, 100, 1000],
            },
        }
    }

    /// A DNA preset: order-1 Markov chain with 6-mer tokens.
    pub fn dna_preset(profile: Profile) -> Self {
        let mut c = Self::profile(profile);
        c.experiment.name = "markov-kmer".into();
        c.experiment.output_dir = PathBuf::from("runs/markov-kmer");
        c.corpus = CorpusSource::SyntheticMarkovDna(MarkovDnaParams {
            order: 1,
            concentration: 10.0,
            length: if profile == Profile::Desk { 12_000_000 } else { 1_000_000_000 },
            seed: 11,
        });
        c.tokenizer.scheme = Scheme::Kmer;
        c
    }

    /// Layers `text` (TOML) over the profile defaults. Keys absent from the
    /// file keep their profile values; unknown keys are errors.
    pub fn from_toml(text: &str, profile: Profile) -> Result<Self, ConfigError> {
        let user: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut base = toml::Table::try_from(Self::profile(profile)).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if let Some(toml::Value::Table(c)) = user.get("corpus") {
            // a corpus table replaces the default source wholesale
            if c.contains_key("kind") {
                base.remove("corpus");
            }
        }
        merge(&mut base, user);
        let cfg: Self = toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Profile) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        Self::from_toml(&text, profile)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.experiment.members == 0 {
            return bad("experiment.members must be at least 1".into());
        }
        match self.tokenizer.scheme {
            Scheme::Bpe if self.corpus.is_dna() && self.tokenizer.vocab_size < 8 => {
                return bad("tokenizer.vocab_size too small".into())
            }
            Scheme::Kmer if !self.corpus.is_dna() => return bad("kmer tokenizer needs a DNA corpus".into()),
            Scheme::Kmer if !(1..=crate::tokenize::MAX_K).contains(&self.tokenizer.k) => {
                return bad(format!("tokenizer.k must lie in 1..={}", crate::tokenize::MAX_K))
            }
            _ => {}
        }
        match &self.corpus {
            CorpusSource::TextFile { path } | CorpusSource::FastaFile { path, .. } if !path.exists() => {
                return bad(format!("corpus file {} does not exist", path.display()))
            }
            CorpusSource::SyntheticGrammarText { n_docs: 0, .. } => return bad("corpus.n_docs must be at least 1".into()),
            _ => {}
        }
        let a = &self.analysis;
        if a.probes == 0 {
            return bad("analysis.probes must be at least 1".into());
        }
        if a.p_grid.is_empty() || a.p_grid.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return bad("analysis.p_grid must be non-empty with values in (0, 1]".into());
        }
        if a.k_grid.is_empty() || a.k_grid.contains(&0) {
            return bad("analysis.k_grid must be non-empty with values >= 1".into());
        }
        self.model_config(16).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Model shape; the vocabulary comes from the tokenizer.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size,
            max_seq_len: m.max_seq_len,
            model_dim: m.model_dim,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            ffn_dim: m.ffn_dim,
            dropout: m.dropout,
            weight_seed: 0,
        }
    }

    pub fn weight_seeds(&self) -> Vec<u64> {
        member_seeds(self.experiment.weight_seed, self.experiment.members)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            data_seed: self.experiment.data_seed,
            weight_seeds: self.weight_seeds(),
            epochs: t.epochs,
            sequences_per_epoch: t.sequences_per_epoch,
            seq_len: self.model.max_seq_len,
            batch_size: t.batch_size,
            mask_rate: t.mask_rate,
            mask_policy: t.mask_policy,
            learning_rate: t.learning_rate,
            warmup_fraction: t.warmup_fraction,
            clip_norm: t.clip_norm,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
        }
    }

    /// Hash of everything except the output location.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.experiment.output_dir = PathBuf::new();
        hash_json(&c)
    }

    /// Hash of the settings that determine the trained weights: corpus,
    /// tokenizer, model, training, member seeds and the held-out split.
    pub fn train_hash(&self) -> String {
        #[derive(Serialize)]
        struct TrainInputs<'a> {
            weight_seeds: Vec<u64>,
            data_seed: u64,
            corpus: &'a CorpusSource,
            tokenizer: &'a TokenizerSection,
            model: &'a ModelSection,
            train: &'a TrainSection,
            probes: usize,
        }
        hash_json(&TrainInputs {
            weight_seeds: self.weight_seeds(),
            data_seed: self.experiment.data_seed,
            corpus: &self.corpus,
            tokenizer: &self.tokenizer,
            model: &self.model,
            train: &self.train,
            probes: self.analysis.probes,
        })
    }
}

fn hash_json<T: Serialize>(v: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("serializes")))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
