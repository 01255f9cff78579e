//! Pre-norm transformer encoder for masked-token prediction.
//!
//! Every parameter tensor carries a [`LayerGroup`] tag and a layer index:
//! 0 for the embedding stack, `1..=L` for the blocks and `L + 1` for the
//! prediction head.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, CheckpointMeta, ParamEntry};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{softmax_rows, Graph, NodeId, Rng, Tensor};
use crate::tokenize::{MASK, PAD};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("position {pos} out of range for length {len}")]
    PositionOutOfRange { pos: usize, len: usize },
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("position {0} does not hold the mask token")]
    NotMasked(usize),
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerGroup {
    Embeddings,
    Transformer,
    Head,
}

impl LayerGroup {
    pub const ALL: [LayerGroup; 3] = [LayerGroup::Embeddings, LayerGroup::Transformer, LayerGroup::Head];

    pub fn name(self) -> &'static str {
        match self {
            LayerGroup::Embeddings => "embeddings",
            LayerGroup::Transformer => "transformer",
            LayerGroup::Head => "head",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub weight_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("model_dim", self.model_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, n, d, f) = (self.vocab_size, self.max_seq_len, self.model_dim, self.ffn_dim);
        let embeddings = v * d + n * d + 2 * d;
        let block = 2 * d + 4 * (d * d + d) + 2 * d + d * f + f + f * d + d;
        let head = 2 * d + d * v + v;
        embeddings + self.n_layers * block + head
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub group: LayerGroup,
    pub layer: usize,
}

/// Named parameter tensors in a fixed order. Index constants for the
/// blocks live in [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub info: Vec<ParamInfo>,
    pub tensors: Vec<Tensor>,
}

/// Position of each tensor inside [`ModelParams::tensors`].
struct Layout;

impl Layout {
    const TOKEN: usize = 0;
    const POSITION: usize = 1;
    const EMB_GAIN: usize = 2;
    const EMB_BIAS: usize = 3;
    const PER_BLOCK: usize = 16;

    fn block(l: usize) -> usize {
        4 + l * Self::PER_BLOCK
    }

    fn final_norm(n_layers: usize) -> usize {
        4 + n_layers * Self::PER_BLOCK
    }
}

const BLOCK_TENSORS: [&str; Layout::PER_BLOCK] = [
    "attn_norm.gain",
    "attn_norm.bias",
    "attn.wq",
    "attn.bq",
    "attn.wk",
    "attn.bk",
    "attn.wv",
    "attn.bv",
    "attn.wo",
    "attn.bo",
    "ffn_norm.gain",
    "ffn_norm.bias",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
];

enum Fill {
    Normal,
    Zero,
    One,
}

fn layout(cfg: &ModelConfig) -> Vec<(ParamInfo, Vec<usize>, Fill)> {
    let (v, n, d, f) = (cfg.vocab_size, cfg.max_seq_len, cfg.model_dim, cfg.ffn_dim);
    let mut out = Vec::new();
    let mut push = |name: String, group, layer, shape: Vec<usize>, fill| {
        out.push((ParamInfo { name, group, layer }, shape, fill));
    };
    let e = LayerGroup::Embeddings;
    push("embeddings.token".into(), e, 0, vec![v, d], Fill::Normal);
    push("embeddings.position".into(), e, 0, vec![n, d], Fill::Normal);
    push("embeddings.norm.gain".into(), e, 0, vec![d], Fill::One);
    push("embeddings.norm.bias".into(), e, 0, vec![d], Fill::Zero);
    for l in 0..cfg.n_layers {
        for name in BLOCK_TENSORS {
            let (shape, fill) = match name {
                "attn_norm.gain" | "ffn_norm.gain" => (vec![d], Fill::One),
                "ffn.w1" => (vec![d, f], Fill::Normal),
                "ffn.b1" => (vec![f], Fill::Zero),
                "ffn.w2" => (vec![f, d], Fill::Normal),
                s if s.contains(".w") => (vec![d, d], Fill::Normal),
                _ => (vec![d], Fill::Zero),
            };
            push(format!("blocks.{l}.{name}"), LayerGroup::Transformer, l + 1, shape, fill);
        }
    }
    let h = LayerGroup::Head;
    let hl = cfg.n_layers + 1;
    push("head.norm.gain".into(), h, hl, vec![d], Fill::One);
    push("head.norm.bias".into(), h, hl, vec![d], Fill::Zero);
    push("head.weight".into(), h, hl, vec![d, v], Fill::Normal);
    push("head.bias".into(), h, hl, vec![v], Fill::Zero);
    out
}

/// Weights from N(0, 0.02^2) truncated at two standard deviations, biases
/// and norm offsets 0, norm gains 1. Tensor `i` draws from its own stream of
/// the weight seed.
pub fn init_params(cfg: &ModelConfig) -> Result<ModelParams, ModelError> {
    cfg.validate()?;
    let mut info = Vec::new();
    let mut tensors = Vec::new();
    for (i, (pi, shape, fill)) in layout(cfg).into_iter().enumerate() {
        let t = match fill {
            Fill::Zero => Tensor::zeros(&shape),
            Fill::One => Tensor::full(&shape, 1.0),
            Fill::Normal => {
                let mut rng = Rng::stream(cfg.weight_seed, &[i as u64]);
                let len = shape.iter().product();
                let data = (0..len)
                    .map(|_| loop {
                        let z = rng.normal();
                        if z.abs() <= 2.0 {
                            break z * INIT_STD;
                        }
                    })
                    .collect();
                Tensor::from_vec(&shape, data)
            }
        };
        info.push(pi);
        tensors.push(t);
    }
    let p = ModelParams { config: cfg.clone(), info, tensors };
    p.check_partition();
    Ok(p)
}

impl ModelParams {
    fn check_partition(&self) {
        assert_eq!(self.info.len(), self.tensors.len());
        let l = self.config.n_layers;
        for pi in &self.info {
            let ok = match pi.group {
                LayerGroup::Embeddings => pi.layer == 0,
                LayerGroup::Transformer => (1..=l).contains(&pi.layer),
                LayerGroup::Head => pi.layer == l + 1,
            };
            assert!(ok, "tensor {} has inconsistent group/layer", pi.name);
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Static token embedding table `[V, d]`.
    pub fn token_embeddings(&self) -> &Tensor {
        &self.tensors[Layout::TOKEN]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.info.iter().position(|p| p.name == name)
    }

    /// Number of layer slots: embeddings, each block, head.
    pub fn n_layer_slots(&self) -> usize {
        self.config.n_layers + 2
    }
}

/// One training or probe example: a token window with the masked
/// positions and their true ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSequence {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Dropout masks come from this stream when the config asks for dropout.
pub struct DropoutRng<'a>(pub &'a mut Rng);

fn dropout_node(g: &mut Graph, x: NodeId, rate: f64, rng: &mut Option<DropoutRng>) -> NodeId {
    let Some(DropoutRng(rng)) = rng else { return x };
    if rate == 0.0 {
        return x;
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..g.value(x).len()).map(|_| if rng.uniform() < rate { 0.0 } else { keep }).collect();
    g.dropout(x, mask)
}

fn check_sequence(cfg: &ModelConfig, tokens: &[usize], positions: &[usize]) -> Result<(), ModelError> {
    if tokens.len() > cfg.max_seq_len {
        return Err(ModelError::TooLong { len: tokens.len(), max: cfg.max_seq_len });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange { id, vocab: cfg.vocab_size });
    }
    if let Some(&pos) = positions.iter().find(|&&p| p >= tokens.len()) {
        return Err(ModelError::PositionOutOfRange { pos, len: tokens.len() });
    }
    Ok(())
}

/// Records the forward pass for a batch on `g` and returns the logits node
/// (one row per masked position, in batch order). Sequences shorter than
/// the longest one are padded with PAD, which attention ignores.
pub fn record_forward(
    g: &mut Graph,
    params: &ModelParams,
    batch: &[MaskedSequence],
    mut dropout: Option<DropoutRng>,
) -> Result<NodeId, ModelError> {
    let cfg = &params.config;
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    for s in batch {
        check_sequence(cfg, &s.tokens, &s.positions)?;
    }
    let t = batch.iter().map(|s| s.tokens.len()).max().unwrap_or(0);
    if t == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let n = batch.len();
    let mut ids = Vec::with_capacity(n * t);
    let mut rows = Vec::new();
    for (b, s) in batch.iter().enumerate() {
        ids.extend_from_slice(&s.tokens);
        ids.resize((b + 1) * t, PAD);
        rows.extend(s.positions.iter().map(|&p| b * t + p));
    }
    let key_mask: Vec<bool> = ids.iter().map(|&id| id != PAD).collect();
    let pos_ids: Vec<usize> = (0..n).flat_map(|_| 0..t).collect();
    let rate = cfg.dropout;

    let tok_table = g.param(Layout::TOKEN);
    let tok = g.gather(tok_table, &ids);
    let pos_table = g.param(Layout::POSITION);
    let pos = g.gather(pos_table, &pos_ids);
    let x = g.add(tok, pos);
    let (gain, bias) = (g.param(Layout::EMB_GAIN), g.param(Layout::EMB_BIAS));
    let x = g.layer_norm(x, gain, bias);
    let mut x = dropout_node(g, x, rate, &mut dropout);

    for l in 0..cfg.n_layers {
        let base = Layout::block(l);
        let p: Vec<NodeId> = (base..base + Layout::PER_BLOCK).map(|i| g.param(i)).collect();
        let h = g.layer_norm(x, p[0], p[1]);
        let q = g.linear(h, p[2], p[3]);
        let k = g.linear(h, p[4], p[5]);
        let v = g.linear(h, p[6], p[7]);
        let a = g.attention(q, k, v, n, t, cfg.n_heads, &key_mask);
        let o = g.linear(a, p[8], p[9]);
        let o = dropout_node(g, o, rate, &mut dropout);
        x = g.add(x, o);
        let h = g.layer_norm(x, p[10], p[11]);
        let f = g.linear(h, p[12], p[13]);
        let f = g.gelu(f);
        let f = g.linear(f, p[14], p[15]);
        let f = dropout_node(g, f, rate, &mut dropout);
        x = g.add(x, f);
    }

    let sel = g.select_rows(x, &rows);
    let fi = Layout::final_norm(cfg.n_layers);
    let (gain, bias) = (g.param(fi), g.param(fi + 1));
    let y = g.layer_norm(sel, gain, bias);
    let (w, b) = (g.param(fi + 2), g.param(fi + 3));
    Ok(g.linear(y, w, b))
}

/// Logits `[positions.len(), V]` at the queried positions of one sequence.
/// Deterministic: dropout is never applied here.
pub fn forward_mlm(params: &ModelParams, tokens: &[usize], positions: &[usize]) -> Result<Tensor, ModelError> {
    if positions.is_empty() {
        check_sequence(&params.config, tokens, positions)?;
        return Ok(Tensor::zeros(&[0, params.config.vocab_size]));
    }
    let seq = MaskedSequence { tokens: tokens.to_vec(), positions: positions.to_vec(), labels: Vec::new() };
    let mut g = Graph::new(&params.tensors);
    let out = record_forward(&mut g, params, std::slice::from_ref(&seq), None)?;
    Ok(g.value(out).clone())
}

/// Mean NLL (nats) over every masked position in the batch and its
/// gradient for each parameter tensor.
pub fn loss_and_grads(
    params: &ModelParams,
    batch: &[MaskedSequence],
    dropout: Option<DropoutRng>,
) -> Result<(f64, Vec<Tensor>), ModelError> {
    let vocab = params.config.vocab_size;
    for s in batch {
        assert_eq!(s.positions.len(), s.labels.len(), "positions and labels differ in length");
        if let Some(&id) = s.labels.iter().find(|&&y| y >= vocab) {
            return Err(ModelError::TokenOutOfRange { id, vocab });
        }
    }
    let labels: Vec<usize> = batch.iter().flat_map(|s| s.labels.iter().copied()).collect();
    if labels.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut g = Graph::new(&params.tensors);
    let logits = record_forward(&mut g, params, batch, dropout)?;
    let loss = g.cross_entropy(logits, &labels);
    let value = g.value(loss).data()[0];
    Ok((value, g.backward(loss, 1.0)))
}

/// Gradient of `log P(label | tokens)` at a single masked position, with
/// the log-probability itself.
pub fn log_prob_grad(
    params: &ModelParams,
    tokens: &[usize],
    position: usize,
    label: usize,
) -> Result<(f64, Vec<Tensor>), ModelError> {
    let seq = MaskedSequence { tokens: tokens.to_vec(), positions: vec![position], labels: vec![label] };
    let (nll, mut grads) = loss_and_grads(params, std::slice::from_ref(&seq), None)?;
    for gr in &mut grads {
        gr.scale(-1.0);
    }
    Ok((-nll, grads))
}

/// Softmax over the vocabulary at a masked position.
pub fn predictive_distribution(params: &ModelParams, tokens: &[usize], position: usize) -> Result<Vec<f64>, ModelError> {
    check_sequence(&params.config, tokens, &[position])?;
    if tokens[position] != MASK {
        return Err(ModelError::NotMasked(position));
    }
    let logits = forward_mlm(params, tokens, &[position])?;
    Ok(softmax_rows(&logits).into_data())
}

#[cfg(test)]
mod tests;
