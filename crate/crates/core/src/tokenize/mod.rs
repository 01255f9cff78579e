//! Byte-pair encoding and non-overlapping k-mer tokenizers behind one type.
//!
//! Ids 0, 1 and 2 are always `[PAD]`, `[MASK]` and `[UNK]`; content tokens
//! follow.

mod bpe;
mod kmer;

use std::borrow::Cow;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use bpe::train_bpe;
pub use kmer::{kmer_tokenizer, MAX_K};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const UNK: usize = 2;
pub const N_SPECIAL: usize = 3;
pub const SPECIAL_TOKENS: [&str; N_SPECIAL] = ["[PAD]", "[MASK]", "[UNK]"];

const FORMAT: &str = "mlm-agreement/tokenizer";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TokenizeError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("target vocabulary {target} must exceed {min} (specials plus {base} base symbols)")]
    TargetTooSmall { target: usize, min: usize, base: usize },
    #[error("corpus ran out of pairs to merge at vocabulary size {achieved} (target {target})")]
    Exhausted { achieved: usize, target: usize },
    #[error("k must be in 1..={MAX_K}, got {0}")]
    KOutOfRange(usize),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },
    #[error("malformed tokenizer file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Bpe,
    Kmer,
}

#[derive(Debug, Clone)]
pub(crate) struct BpeModel {
    pub(crate) vocab: Vec<String>,
    pub(crate) index: HashMap<String, usize>,
    /// Merges in application order, as (left id, right id, result id).
    pub(crate) merges: Vec<(usize, usize, usize)>,
    /// (left, right) -> (rank, result)
    pub(crate) ranks: HashMap<(usize, usize), (usize, usize)>,
    pub(crate) base: HashMap<char, usize>,
}

#[derive(Debug, Clone)]
enum Model {
    Bpe(BpeModel),
    Kmer { k: usize },
}

/// A trained or constructed tokenizer. Immutable; encoding is pure.
#[derive(Debug, Clone)]
pub struct TokenizerSpec {
    model: Model,
}

#[derive(Serialize, Deserialize)]
struct SpecialIds {
    pad: usize,
    mask: usize,
    unk: usize,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    format: String,
    version: u32,
    scheme: Scheme,
    k: Option<usize>,
    specials: SpecialIds,
    vocab_size: usize,
    vocab: Vec<String>,
    merges: Vec<[String; 2]>,
}

impl TokenizerSpec {
    pub(crate) fn from_bpe(model: BpeModel) -> Self {
        Self { model: Model::Bpe(model) }
    }

    pub(crate) fn from_kmer(k: usize) -> Self {
        Self { model: Model::Kmer { k } }
    }

    pub fn scheme(&self) -> Scheme {
        match self.model {
            Model::Bpe(_) => Scheme::Bpe,
            Model::Kmer { .. } => Scheme::Kmer,
        }
    }

    /// `Some(k)` for the k-mer scheme.
    pub fn k(&self) -> Option<usize> {
        match self.model {
            Model::Kmer { k } => Some(k),
            Model::Bpe(_) => None,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match &self.model {
            Model::Bpe(m) => m.vocab.len(),
            Model::Kmer { k } => N_SPECIAL + 4usize.pow(*k as u32),
        }
    }

    /// Shortest input span a content token can cover.
    pub fn min_unit(&self) -> usize {
        self.k().unwrap_or(1)
    }

    pub fn merges(&self) -> Vec<(String, String)> {
        match &self.model {
            Model::Bpe(m) => m.merges.iter().map(|&(a, b, _)| (m.vocab[a].clone(), m.vocab[b].clone())).collect(),
            Model::Kmer { .. } => Vec::new(),
        }
    }

    pub fn token(&self, id: usize) -> Result<Cow<'_, str>, TokenizeError> {
        let vocab = self.vocab_size();
        if id >= vocab {
            return Err(TokenizeError::IdOutOfRange { id, vocab });
        }
        if id < N_SPECIAL {
            return Ok(Cow::Borrowed(SPECIAL_TOKENS[id]));
        }
        Ok(match &self.model {
            Model::Bpe(m) => Cow::Borrowed(m.vocab[id].as_str()),
            Model::Kmer { k } => Cow::Owned(kmer::kmer_string(id - N_SPECIAL, *k)),
        })
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        if let Some(i) = SPECIAL_TOKENS.iter().position(|s| *s == token) {
            return Some(i);
        }
        match &self.model {
            Model::Bpe(m) => m.index.get(token).copied(),
            Model::Kmer { k } => kmer::kmer_index(token.as_bytes(), *k).map(|i| i + N_SPECIAL),
        }
    }

    /// All token strings in id order.
    pub fn vocab(&self) -> Vec<String> {
        (0..self.vocab_size()).map(|i| self.token(i).expect("in range").into_owned()).collect()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        match &self.model {
            Model::Bpe(m) => bpe::encode(m, text, &mut HashMap::new()),
            Model::Kmer { k } => kmer::encode(text, *k),
        }
    }

    /// Encodes many documents, sharing a word cache across them.
    pub fn encode_all(&self, docs: &[String]) -> Vec<Vec<usize>> {
        match &self.model {
            Model::Bpe(m) => {
                let mut cache = HashMap::new();
                docs.iter().map(|d| bpe::encode(m, d, &mut cache)).collect()
            }
            Model::Kmer { k } => docs.iter().map(|d| kmer::encode(d, *k)).collect(),
        }
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String, TokenizeError> {
        let mut out = String::new();
        for &id in ids {
            out.push_str(&self.token(id)?);
        }
        Ok(out)
    }

    /// Canonical JSON form. Byte-identical for identical tokenizers.
    pub fn to_json(&self) -> String {
        let file = TokenizerFile {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            scheme: self.scheme(),
            k: self.k(),
            specials: SpecialIds { pad: PAD, mask: MASK, unk: UNK },
            vocab_size: self.vocab_size(),
            vocab: self.vocab(),
            merges: self.merges().into_iter().map(|(a, b)| [a, b]).collect(),
        };
        serde_json::to_string_pretty(&file).expect("tokenizer serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, TokenizeError> {
        let file: TokenizerFile = serde_json::from_str(s)?;
        if file.format != FORMAT || file.version != FORMAT_VERSION {
            return Err(TokenizeError::Malformed(format!("unsupported format {} v{}", file.format, file.version)));
        }
        if (file.specials.pad, file.specials.mask, file.specials.unk) != (PAD, MASK, UNK) {
            return Err(TokenizeError::Malformed("special ids must be pad=0 mask=1 unk=2".into()));
        }
        let spec = match file.scheme {
            Scheme::Kmer => {
                let k = file.k.ok_or_else(|| TokenizeError::Malformed("kmer tokenizer without k".into()))?;
                kmer_tokenizer(k)?
            }
            Scheme::Bpe => bpe::from_parts(&file.vocab, &file.merges)?,
        };
        if spec.vocab_size() != file.vocab_size || spec.vocab() != file.vocab {
            return Err(TokenizeError::Malformed("vocabulary does not match its scheme".into()));
        }
        Ok(spec)
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Splits text into pre-tokens: whitespace-separated words, every word but
/// the first carrying one leading space. Merges never cross pre-tokens.
pub(crate) fn pretokenize(text: &str) -> impl Iterator<Item = Cow<'_, str>> {
    text.split_whitespace().enumerate().map(|(i, w)| if i == 0 { Cow::Borrowed(w) } else { Cow::Owned(format!(" {w}")) })
}
