//! Corpus ingestion and synthetic corpus generation.
//!
//! Every source yields its documents in a fixed order that depends only on
//! its fields, so ensemble members trained from the same source see the same
//! stream.

mod fasta;
mod grammar;
mod markov;
mod text;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use fasta::{load_fasta, write_fasta, FastaLoad};
pub use grammar::{gen_grammar_text, GrammarStats, TEMPLATE_COUNT};
pub use markov::{gen_markov_dna, MarkovChain, MarkovDnaParams};
pub use text::load_text_corpus;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: invalid UTF-8 at byte offset {offset}")]
    Encoding { path: PathBuf, offset: usize },
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
}

/// Where a training corpus comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CorpusSource {
    TextFile { path: PathBuf },
    FastaFile {
        path: PathBuf,
        /// Shortest ACGT run kept when a record is split at other symbols.
        #[serde(default = "default_min_fragment")]
        min_fragment: usize,
    },
    SyntheticMarkovDna(MarkovDnaParams),
    SyntheticGrammarText { seed: u64, n_docs: usize },
}

impl CorpusSource {
    pub fn is_dna(&self) -> bool {
        matches!(self, CorpusSource::FastaFile { .. } | CorpusSource::SyntheticMarkovDna(_))
    }

    /// Materializes the documents (text) or sequences (DNA) of this source.
    ///
    pub fn documents(&self) -> Result<Vec<String>, CorpusError> {
        match self {
            CorpusSource::TextFile { path } => load_text_corpus(path),
            CorpusSource::FastaFile { path, min_fragment } => Ok(load_fasta(path, *min_fragment)?.sequences),
            CorpusSource::SyntheticMarkovDna(p) => Ok(vec![gen_markov_dna(p)?]),
            CorpusSource::SyntheticGrammarText { seed, n_docs } => gen_grammar_text(*seed, *n_docs),
        }
    }
}

/// Shannon entropy in bits of the empirical distribution given by `counts`.
fn default_min_fragment() -> usize {
    64
}

pub fn entropy_of_counts<I: IntoIterator<Item = u64>>(counts: I) -> f64 {
    let counts: Vec<u64> = counts.into_iter().filter(|&c| c > 0).collect();
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    -counts.iter().map(|&c| c as f64 / n).map(|p| p * p.log2()).sum::<f64>()
}
