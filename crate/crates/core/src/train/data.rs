//! Token windows, masking and the shared batch stream.

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::model::MaskedSequence;
use crate::numeric::Rng;
use crate::tokenize::{MASK, N_SPECIAL, PAD};

/// What a selected position is replaced with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    /// 80% MASK, 10% random content id, 10% unchanged.
    Bert,
    /// Always MASK.
    AllMask,
}

/// Selects each non-PAD token with probability `rate` (at least one is
/// always selected) and corrupts the selected tokens per `policy`.
pub fn mask_tokens(ids: &[usize], rate: f64, vocab_size: usize, policy: MaskPolicy, rng: &mut Rng) -> MaskedSequence {
    let candidates: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] != PAD).collect();
    assert!(!candidates.is_empty(), "cannot mask an all-PAD sequence");
    let mut positions: Vec<usize> = candidates.iter().copied().filter(|_| rng.uniform() < rate).collect();
    if positions.is_empty() {
        positions.push(candidates[rng.below(candidates.len())]);
    }
    let mut tokens = ids.to_vec();
    let labels = positions.iter().map(|&p| ids[p]).collect();
    for &p in &positions {
        tokens[p] = match policy {
            MaskPolicy::AllMask => MASK,
            MaskPolicy::Bert => {
                let u = rng.uniform();
                if u < 0.8 {
                    MASK
                } else if u < 0.9 && vocab_size > N_SPECIAL {
                    N_SPECIAL + rng.below(vocab_size - N_SPECIAL)
                } else {
                    ids[p]
                }
            }
        };
    }
    MaskedSequence { tokens, positions, labels }
}

/// Concatenates documents and cuts the stream into windows of `seq_len`;
/// the final partial window is PAD-filled.
pub fn pack_windows(docs: &[Vec<usize>], seq_len: usize) -> Vec<Vec<usize>> {
    assert!(seq_len > 0);
    let stream: Vec<usize> = docs.iter().flatten().copied().collect();
    stream
        .chunks(seq_len)
        .map(|c| {
            let mut w = c.to_vec();
            w.resize(seq_len, PAD);
            w
        })
        .collect()
}

/// A held-out window with one masked position.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProbeSample {
    pub tokens: Vec<usize>,
    pub position: usize,
    pub label: usize,
}

/// One probe per window: a uniformly chosen non-PAD position is replaced
/// by MASK.
pub fn make_probes(windows: &[Vec<usize>], seed: u64) -> Vec<ProbeSample> {
    windows
        .iter()
        .enumerate()
        .filter_map(|(i, w)| {
            let cands: Vec<usize> = (0..w.len()).filter(|&j| w[j] != PAD).collect();
            if cands.is_empty() {
                return None;
            }
            let mut rng = Rng::stream(seed, &[3, i as u64]);
            let position = cands[rng.below(cands.len())];
            let mut tokens = w.clone();
            tokens[position] = MASK;
            Some(ProbeSample { tokens, position, label: w[position] })
        })
        .collect()
}

/// The batch sequence as a pure function of the data seed: epoch `e`
/// visits a seeded permutation of the windows (cycled if the epoch asks
/// for more sequences than exist), and sequence `i` of epoch `e` is masked
/// from its own stream.
#[derive(Debug, Clone)]
pub struct BatchStream {
    windows: Vec<Vec<usize>>,
    data_seed: u64,
    per_epoch: usize,
    batch_size: usize,
    rate: f64,
    policy: MaskPolicy,
    vocab_size: usize,
}

impl BatchStream {
    pub fn new(windows: Vec<Vec<usize>>, cfg: &TrainConfig, vocab_size: usize) -> Result<Self, TrainError> {
        if windows.is_empty() {
            return Err(TrainError::InvalidConfig("no training windows".into()));
        }
        for w in &windows {
            if w.len() > cfg.seq_len || w.iter().all(|&t| t == PAD) {
                return Err(TrainError::InvalidConfig("window longer than seq_len or all PAD".into()));
            }
            if let Some(&id) = w.iter().find(|&&t| t >= vocab_size) {
                return Err(TrainError::InvalidConfig(format!("token id {id} outside vocab {vocab_size}")));
            }
        }
        Ok(Self {
            windows,
            data_seed: cfg.data_seed,
            per_epoch: cfg.sequences_per_epoch,
            batch_size: cfg.batch_size,
            rate: cfg.mask_rate,
            policy: cfg.mask_policy,
            vocab_size,
        })
    }

    pub fn n_windows(&self) -> usize {
        self.windows.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.per_epoch.div_ceil(self.batch_size)
    }

    fn order(&self, epoch: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.windows.len()).collect();
        Rng::stream(self.data_seed, &[1, epoch as u64]).shuffle(&mut perm);
        perm
    }

    pub fn batch(&self, epoch: usize, b: usize) -> Vec<MaskedSequence> {
        let perm = self.order(epoch);
        let start = b * self.batch_size;
        let end = (start + self.batch_size).min(self.per_epoch);
        (start..end)
            .map(|i| {
                let w = &self.windows[perm[i % perm.len()]];
                let mut rng = Rng::stream(self.data_seed, &[2, epoch as u64, i as u64]);
                mask_tokens(w, self.rate, self.vocab_size, self.policy, &mut rng)
            })
            .collect()
    }
}
