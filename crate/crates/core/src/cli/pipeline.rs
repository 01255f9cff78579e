//! The tokenizer → train → analyze pipeline behind the subcommands.

use std::ops::Range;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::config::{ConfigError, ExperimentConfig};
use super::report::{self, DiagnosticsReport};
use crate::corpus::CorpusError;
use crate::fisher::{ensemble_fisher, FisherError};
use crate::metrics::{agreement_table, analyze_probes, knn, EmbeddingMatrix, MetricsError};
use crate::model::{read_checkpoint, Checkpoint, CheckpointError};
use crate::tokenize::{kmer_tokenizer, train_bpe, Scheme, TokenizeError, TokenizerSpec};
use crate::train::{load_ensemble, make_probes, pack_windows, train_ensemble, ProbeSample, RunIdentity, TrainError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    /// Inputs inconsistent with the config; raised before any work starts.
    #[error("{0}")]
    Validation(String),
    #[error("corpus: {0}")]
    Corpus(#[from] CorpusError),
    #[error("tokenizer: {0}")]
    Tokenize(#[from] TokenizeError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("fisher: {0}")]
    Fisher(#[from] FisherError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Query(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Validation(_) => 2,
            _ => 3,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_owned(), source }
}

/// File layout of one experiment directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn tokenizer(&self) -> PathBuf {
        self.root.join("tokenizer.json")
    }
    pub fn members(&self) -> PathBuf {
        self.root.join("members")
    }
    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
}

fn ensure_dir(p: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(p).map_err(io_err(p))
}

pub fn build_tokenizer(cfg: &ExperimentConfig, docs: &[String]) -> Result<TokenizerSpec, PipelineError> {
    Ok(match cfg.tokenizer.scheme {
        Scheme::Bpe => train_bpe(docs, cfg.tokenizer.vocab_size)?,
        Scheme::Kmer => kmer_tokenizer(cfg.tokenizer.k)?,
    })
}

/// Trains or constructs the tokenizer and writes `tokenizer.json`.
pub fn cmd_tokenizer(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<TokenizerSpec, PipelineError> {
    ensure_dir(&paths.root)?;
    let docs = cfg.corpus.documents()?;
    let tok = build_tokenizer(cfg, &docs)?;
    let p = paths.tokenizer();
    crate::fsutil::write_atomic(&p, tok.to_json().as_bytes()).map_err(io_err(&p))?;
    log::info!("tokenizer: {} entries -> {}", tok.vocab_size(), p.display());
    Ok(tok)
}

pub fn load_tokenizer(paths: &RunPaths) -> Result<TokenizerSpec, PipelineError> {
    let p = paths.tokenizer();
    if !p.exists() {
        return Err(PipelineError::Validation(format!(
            "tokenizer file {} not found; run the tokenizer command first",
            p.display()
        )));
    }
    let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
    Ok(TokenizerSpec::from_json(&text)?)
}

/// Windows of the tokenized corpus, split into a training prefix and a
/// held-out tail of probe windows.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Vec<usize>>,
    pub held_out: Vec<Vec<usize>>,
    pub train_range: Range<usize>,
    pub probe_range: Range<usize>,
    pub n_tokens: usize,
}

impl Dataset {
    pub fn probes(&self, data_seed: u64) -> Vec<ProbeSample> {
        make_probes(&self.held_out, data_seed)
    }
}

pub fn build_dataset(cfg: &ExperimentConfig, tok: &TokenizerSpec) -> Result<Dataset, PipelineError> {
    let docs = cfg.corpus.documents()?;
    let ids = tok.encode_all(&docs);
    let n_tokens = ids.iter().map(Vec::len).sum();
    let mut windows = pack_windows(&ids, cfg.model.max_seq_len);
    let n_probe = cfg.analysis.probes;
    if windows.len() < n_probe + 1 {
        return Err(PipelineError::Validation(format!(
            "corpus yields {} windows of {} tokens; need more than analysis.probes = {n_probe}",
            windows.len(),
            cfg.model.max_seq_len
        )));
    }
    let split = windows.len() - n_probe;
    let held_out = windows.split_off(split);
    let ds = Dataset { train_range: 0..split, probe_range: split..split + n_probe, train: windows, held_out, n_tokens };
    assert!(ds.train_range.end <= ds.probe_range.start, "probe windows overlap training windows");
    Ok(ds)
}

pub struct TrainOutcome {
    pub members: Vec<Checkpoint>,
    pub trained: usize,
    pub resumed: usize,
}

/// Trains every member (or reuses finished ones) and writes the training log.
pub fn cmd_train(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<TrainOutcome, PipelineError> {
    let tok = load_tokenizer(paths)?;
    if tok.scheme() != cfg.tokenizer.scheme {
        return Err(PipelineError::Validation("tokenizer file does not match the configured scheme".into()));
    }
    let ds = build_dataset(cfg, &tok)?;
    ensure_dir(&paths.members())?;
    let cp = paths.config();
    crate::fsutil::write_atomic(&cp, cfg.to_toml().as_bytes()).map_err(io_err(&cp))?;
    let id = RunIdentity { tokenizer_hash: tok.hash(), config_hash: cfg.train_hash() };
    log::info!(
        "training {} members on {} windows ({} held out)",
        cfg.experiment.members,
        ds.train.len(),
        ds.held_out.len()
    );
    let results = train_ensemble(
        &cfg.train_config(),
        &cfg.model_config(tok.vocab_size()),
        ds.train,
        &id,
        Some(&paths.members()),
    )?;
    report::write_train_log(&paths.train_log(), &cfg.config_hash(), &results)?;
    let resumed = results.iter().filter(|r| r.resumed).count();
    Ok(TrainOutcome {
        trained: results.len() - resumed,
        resumed,
        members: results.into_iter().map(|r| r.checkpoint).collect(),
    })
}

/// Loads the ensemble and refuses checkpoints built from a different
/// tokenizer or training configuration.
pub fn load_checked_members(cfg: &ExperimentConfig, paths: &RunPaths, tok: &TokenizerSpec) -> Result<Vec<Checkpoint>, PipelineError> {
    let members = load_ensemble(&paths.members(), cfg.experiment.members)?;
    let (th, ch) = (tok.hash(), cfg.train_hash());
    for m in &members {
        if m.meta.tokenizer_hash != th {
            return Err(PipelineError::Validation(format!(
                "member {} was trained with a different tokenizer (hash {} vs {th})",
                m.meta.member, m.meta.tokenizer_hash
            )));
        }
        if m.meta.config_hash != ch {
            return Err(PipelineError::Validation(format!(
                "member {} was trained under a different configuration",
                m.meta.member
            )));
        }
    }
    Ok(members)
}

pub fn cmd_analyze(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<DiagnosticsReport, PipelineError> {
    let tok = load_tokenizer(paths)?;
    let members = load_checked_members(cfg, paths, &tok)?;
    let ds = build_dataset(cfg, &tok)?;
    let candidates = tok.vocab_size().saturating_sub(crate::tokenize::N_SPECIAL + 1);
    if let Some(&k) = cfg.analysis.k_grid.iter().find(|&&k| k > candidates) {
        return Err(PipelineError::Validation(format!(
            "analysis.k_grid value {k} exceeds the {candidates} possible neighbors"
        )));
    }
    let probes = ds.probes(cfg.experiment.data_seed);
    let params: Vec<_> = members.iter().map(|c| &c.params).collect();
    log::info!("analyzing {} members on {} probes", params.len(), probes.len());
    let probe_stats = analyze_probes(&params, &probes, &cfg.analysis.p_grid)?;
    let agreement = if params.len() >= 2 {
        let emb: Vec<EmbeddingMatrix> = params.iter().map(|p| EmbeddingMatrix::from_params(p)).collect();
        Some(agreement_table(&emb, &cfg.analysis.k_grid)?)
    } else {
        None
    };
    let nf = match cfg.analysis.fisher_probes {
        0 => probes.len(),
        n => n.min(probes.len()),
    };
    let fisher = ensemble_fisher(&params, &probes[..nf])?;
    let rep = report::build_report(cfg, &tok, &ds, &members, probe_stats, agreement, fisher);
    report::write_outputs(paths, cfg, &rep)?;
    Ok(rep)
}

/// Neighbors of a vocabulary string in one member's static embeddings.
pub fn cmd_neighbors(
    ckpt: &Checkpoint,
    tok: &TokenizerSpec,
    token: &str,
    k: usize,
) -> Result<Vec<(String, f64)>, PipelineError> {
    if ckpt.meta.tokenizer_hash != tok.hash() {
        return Err(PipelineError::Validation("checkpoint was trained with a different tokenizer".into()));
    }
    let id = tok.id_of(token).or_else(|| tok.id_of(&format!(" {token}"))).ok_or_else(|| {
        let mut vocab: Vec<(usize, String)> =
            tok.vocab().into_iter().map(|v| (strsim::levenshtein(token, v.trim_start()), v)).collect();
        vocab.sort();
        let near: Vec<String> = vocab.into_iter().take(5).map(|(_, v)| format!("{v:?}")).collect();
        PipelineError::Query(format!("token {token:?} is not in the vocabulary; nearest: {}", near.join(", ")))
    })?;
    if k == 0 {
        return Ok(Vec::new());
    }
    let e = EmbeddingMatrix::from_params(&ckpt.params);
    let list = knn(&e, id, k).map_err(|err| PipelineError::Query(err.to_string()))?;
    list.into_iter().map(|(j, c)| Ok((tok.token(j)?.into_owned(), c))).collect()
}

pub fn read_member(paths: &RunPaths, member: usize) -> Result<Checkpoint, PipelineError> {
    Ok(read_checkpoint(&crate::train::member_path(&paths.members(), member))?)
}
