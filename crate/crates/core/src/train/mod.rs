//! Masked-LM training for matched ensembles.
//!
//! Every member sees the same batch stream: window order and masking are
//! drawn from the data seed only. Members differ in their weight seed.

mod data;
mod optim;

pub use data::{make_probes, mask_tokens, pack_windows, BatchStream, MaskPolicy, ProbeSample};
pub use optim::{adamw_step, clip_global_norm, AdamHyper, AdamState, StepStats};

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    init_params, loss_and_grads, read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, CheckpointMeta,
    DropoutRng, ModelConfig, ModelError, ModelParams,
};
use crate::numeric::{derive_seed, Rng};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("member {member}: non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite { member: usize, epoch: usize, step: u64, what: &'static str },
    #[error("non-finite gradient; step rejected")]
    NonFiniteGradient,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub data_seed: u64,
    pub weight_seeds: Vec<u64>,
    pub epochs: usize,
    pub sequences_per_epoch: usize,
    pub seq_len: usize,
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

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data_seed: 0,
            weight_seeds: vec![1, 2, 3],
            epochs: 5,
            sequences_per_epoch: 4096,
            seq_len: 64,
            batch_size: 16,
            mask_rate: 0.15,
            mask_policy: MaskPolicy::Bert,
            learning_rate: 1e-4,
            warmup_fraction: 0.01,
            clip_norm: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.weight_seeds.is_empty() {
            return bad("weight_seeds must not be empty".into());
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("sequences_per_epoch", self.sequences_per_epoch),
            ("seq_len", self.seq_len),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return bad(format!("mask_rate {} outside [0, 1]", self.mask_rate));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} outside [0, 1]", self.warmup_fraction));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay nonnegative".into());
        }
        Ok(())
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.sequences_per_epoch.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.batches_per_epoch()) as u64
    }

    /// Linear warmup over the first `warmup_fraction` of steps, then flat.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = (self.warmup_fraction * self.total_steps() as f64).ceil() as u64;
        if step < warm {
            self.learning_rate * (step + 1) as f64 / warm as f64
        } else {
            self.learning_rate
        }
    }
}

/// Weight seeds for `n` members derived from one base seed.
pub fn member_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| derive_seed(base, &[i])).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub member: usize,
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct MemberResult {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub resumed: bool,
}

/// Identity fields stamped into each checkpoint.
#[derive(Debug, Clone, Default)]
pub struct RunIdentity {
    pub tokenizer_hash: String,
    pub config_hash: String,
}

pub fn train_member(
    cfg: &TrainConfig,
    model: &ModelConfig,
    stream: &BatchStream,
    member: usize,
    id: &RunIdentity,
) -> Result<MemberResult, TrainError> {
    let weight_seed = cfg.weight_seeds[member];
    let mcfg = ModelConfig { weight_seed, ..model.clone() };
    let mut params = init_params(&mcfg)?;
    let decay: Vec<bool> = params.tensors.iter().map(|t| t.shape().len() == 2).collect();
    let mut state = AdamState::new(&params.tensors);
    let mut dropout_rng = Rng::stream(weight_seed, &[0xd0]);
    let hyper = cfg.hyper();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    let mut tokens_seen = 0u64;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut total = 0.0;
        for b in 0..stream.batches_per_epoch() {
            let batch = stream.batch(epoch, b);
            let dropout = (mcfg.dropout > 0.0).then(|| DropoutRng(&mut dropout_rng));
            let (loss, mut grads) = loss_and_grads(&params, &batch, dropout)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { member, epoch, step, what: "loss" });
            }
            let lr = cfg.lr_at(step);
            adamw_step(&mut params.tensors, &mut grads, &mut state, &AdamHyper { lr, ..hyper }, &decay).map_err(
                |_| TrainError::NonFinite { member, epoch, step, what: "gradient" },
            )?;
            total += loss;
            step += 1;
            tokens_seen += batch.iter().map(|s| s.tokens.len() as u64).sum::<u64>();
        }
        let mean_loss = total / stream.batches_per_epoch() as f64;
        log::info!("member {member} epoch {} loss {mean_loss:.4}", epoch + 1);
        log.push(EpochLog { member, epoch: epoch + 1, mean_loss, wall_seconds: start.elapsed().as_secs_f64() });
    }
    let meta = CheckpointMeta {
        member,
        weight_seed,
        data_seed: cfg.data_seed,
        tokenizer_hash: id.tokenizer_hash.clone(),
        config_hash: id.config_hash.clone(),
        steps: step,
        tokens_seen,
        epoch_loss: log.iter().map(|l| l.mean_loss).collect(),
    };
    Ok(MemberResult { checkpoint: Checkpoint { meta, params }, log, resumed: false })
}

pub fn member_path(dir: &Path, member: usize) -> PathBuf {
    dir.join(format!("member_{member:02}.ckpt"))
}

/// Trains all members, members in parallel. With `ckpt_dir`, each finished
/// member is written there, and members whose checkpoint already exists
/// with the same identity are loaded instead of retrained.
pub fn train_ensemble(
    cfg: &TrainConfig,
    model: &ModelConfig,
    windows: Vec<Vec<usize>>,
    id: &RunIdentity,
    ckpt_dir: Option<&Path>,
) -> Result<Vec<MemberResult>, TrainError> {
    cfg.validate()?;
    model.validate()?;
    let stream = BatchStream::new(windows, cfg, model.vocab_size)?;
    (0..cfg.weight_seeds.len())
        .into_par_iter()
        .map(|member| {
            if let Some(dir) = ckpt_dir {
                let path = member_path(dir, member);
                if path.exists() {
                    let ck = read_checkpoint(&path)?;
                    let m = &ck.meta;
                    if m.config_hash == id.config_hash
                        && m.tokenizer_hash == id.tokenizer_hash
                        && m.weight_seed == cfg.weight_seeds[member]
                    {
                        log::info!("member {member}: reusing {}", path.display());
                        return Ok(MemberResult { checkpoint: ck, log: Vec::new(), resumed: true });
                    }
                }
            }
            let result = train_member(cfg, model, &stream, member, id)?;
            if let Some(dir) = ckpt_dir {
                write_checkpoint(&member_path(dir, member), &result.checkpoint)?;
            }
            Ok(result)
        })
        .collect()
}

/// Members loaded in index order.
pub fn load_ensemble(dir: &Path, n: usize) -> Result<Vec<Checkpoint>, TrainError> {
    (0..n).map(|m| Ok(read_checkpoint(&member_path(dir, m))?)).collect()
}

pub fn params_of(members: &[Checkpoint]) -> Vec<&ModelParams> {
    members.iter().map(|c| &c.params).collect()
}

#[cfg(test)]
mod tests;
