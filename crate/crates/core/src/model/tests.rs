use super::*;
use crate::numeric::Rng;

fn tiny(v: usize, d: usize, l: usize, h: usize, f: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: v,
        max_seq_len: 8,
        model_dim: d,
        n_layers: l,
        n_heads: h,
        ffn_dim: f,
        dropout: 0.0,
        weight_seed: seed,
    }
}

/// Random parameters at a larger scale than init so that every gradient
/// entry is comfortably above finite-difference noise.
fn randomized(cfg: &ModelConfig, seed: u64, scale: f64) -> ModelParams {
    let mut p = init_params(cfg).unwrap();
    let mut rng = Rng::new(seed);
    for t in &mut p.tensors {
        for v in t.data_mut() {
            *v += scale * rng.normal();
        }
    }
    p
}

fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let r = 1.0 / (var + 1e-12).sqrt();
    (0..x.len()).map(|i| (x[i] - mean) * r * g[i] + b[i]).collect()
}

fn affine(x: &[f64], w: &Tensor, b: &[f64]) -> Vec<f64> {
    let (din, dout) = (w.rows(), w.cols());
    (0..dout).map(|j| b[j] + (0..din).map(|i| x[i] * w.get2(i, j)).sum::<f64>()).collect()
}

fn named<'a>(p: &'a ModelParams, name: &str) -> &'a Tensor {
    &p.tensors[p.index_of(name).unwrap_or_else(|| panic!("no tensor {name}"))]
}

/// Straight-line evaluation of the whole network, one token and one head
/// at a time.
fn naive_logits(p: &ModelParams, tokens: &[usize], pos: usize) -> Vec<f64> {
    let c = &p.config;
    let (d, hn) = (c.model_dim, c.n_heads);
    let dh = d / hn;
    let t = tokens.len();
    let tok = named(p, "embeddings.token");
    let pe = named(p, "embeddings.position");
    let mut x: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            let e: Vec<f64> = (0..d).map(|j| tok.get2(tokens[i], j) + pe.get2(i, j)).collect();
            ln(&e, named(p, "embeddings.norm.gain").data(), named(p, "embeddings.norm.bias").data())
        })
        .collect();
    for l in 0..c.n_layers {
        let w = |s: &str| named(p, &format!("blocks.{l}.{s}"));
        let h: Vec<Vec<f64>> = x.iter().map(|r| ln(r, w("attn_norm.gain").data(), w("attn_norm.bias").data())).collect();
        let q: Vec<Vec<f64>> = h.iter().map(|r| affine(r, w("attn.wq"), w("attn.bq").data())).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|r| affine(r, w("attn.wk"), w("attn.bk").data())).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|r| affine(r, w("attn.wv"), w("attn.bv").data())).collect();
        let mut attn = vec![vec![0.0; d]; t];
        for i in 0..t {
            for head in 0..hn {
                let cols = head * dh..(head + 1) * dh;
                let mut s: Vec<f64> = (0..t)
                    .map(|j| {
                        if tokens[j] == PAD {
                            f64::NEG_INFINITY
                        } else {
                            cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                        }
                    })
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                for v in &mut s {
                    *v = (*v - m).exp() / z;
                }
                for c in cols {
                    attn[i][c] = (0..t).map(|j| s[j] * v[j][c]).sum();
                }
            }
        }
        for i in 0..t {
            let o = affine(&attn[i], w("attn.wo"), w("attn.bo").data());
            for j in 0..d {
                x[i][j] += o[j];
            }
            let h = ln(&x[i], w("ffn_norm.gain").data(), w("ffn_norm.bias").data());
            let f: Vec<f64> = affine(&h, w("ffn.w1"), w("ffn.b1").data())
                .into_iter()
                .map(|u| 0.5 * u * (1.0 + libm::erf(u / std::f64::consts::SQRT_2)))
                .collect();
            let f = affine(&f, w("ffn.w2"), w("ffn.b2").data());
            for j in 0..d {
                x[i][j] += f[j];
            }
        }
    }
    let y = ln(&x[pos], named(p, "head.norm.gain").data(), named(p, "head.norm.bias").data());
    affine(&y, named(p, "head.weight"), named(p, "head.bias").data())
}

#[test]
fn closed_form_param_count() {
    let cfg = ModelConfig {
        vocab_size: 259,
        max_seq_len: 64,
        model_dim: 64,
        n_layers: 2,
        n_heads: 4,
        ffn_dim: 256,
        dropout: 0.0,
        weight_seed: 1,
    };
    // embeddings 259*64 + 64*64 + 128 = 20800
    // block 128 + 4*(4096+64) + 128 + 16384 + 256 + 16384 + 64 = 49984
    // head 128 + 64*259 + 259 = 16963
    assert_eq!(20800 + 2 * 49984 + 16963, 137731);
    assert_eq!(cfg.param_count(), 137731);
    assert_eq!(init_params(&cfg).unwrap().param_count(), 137731);
}

#[test]
fn init_is_seeded() {
    let cfg = tiny(11, 8, 2, 2, 12, 5);
    let a = init_params(&cfg).unwrap();
    assert_eq!(a, init_params(&cfg).unwrap());
    let b = init_params(&ModelConfig { weight_seed: 6, ..cfg }).unwrap();
    assert_ne!(a.tensors, b.tensors);
    for (pi, t) in a.info.iter().zip(&a.tensors) {
        let max = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if pi.name.ends_with("gain") {
            assert!(t.data().iter().all(|&v| v == 1.0));
        } else if t.shape().len() == 1 {
            assert_eq!(max, 0.0, "{}", pi.name);
        } else {
            assert!(max <= 2.0 * INIT_STD && max > 0.0, "{}", pi.name);
        }
    }
}

#[test]
fn group_partition() {
    let p = init_params(&tiny(11, 8, 2, 2, 12, 5)).unwrap();
    let groups: Vec<LayerGroup> = p.info.iter().map(|i| i.group).collect();
    assert_eq!(groups.iter().filter(|&&g| g == LayerGroup::Embeddings).count(), 4);
    assert_eq!(groups.iter().filter(|&&g| g == LayerGroup::Transformer).count(), 32);
    assert_eq!(groups.iter().filter(|&&g| g == LayerGroup::Head).count(), 4);
    assert_eq!(p.info.last().unwrap().layer, 3);
}

#[test]
fn rejects_bad_configs() {
    assert!(init_params(&tiny(11, 9, 1, 2, 4, 0)).is_err());
    assert!(init_params(&tiny(0, 8, 1, 2, 4, 0)).is_err());
    assert!(init_params(&tiny(11, 8, 0, 2, 4, 0)).is_err());
}

#[test]
fn zero_weights_give_uniform() {
    let cfg = tiny(13, 8, 1, 2, 8, 0);
    let mut p = init_params(&cfg).unwrap();
    for t in &mut p.tensors {
        t.data_mut().fill(0.0);
    }
    let logits = forward_mlm(&p, &[4, MASK, 6], &[1]).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
    let dist = predictive_distribution(&p, &[4, MASK, 6], 1).unwrap();
    assert!(dist.iter().all(|&v| (v - 1.0 / 13.0).abs() < 1e-15));
}

#[test]
fn uniform_nll_is_log_vocab() {
    let cfg = ModelConfig { max_seq_len: 4, ..tiny(4096, 4, 1, 1, 4, 0) };
    let mut p = init_params(&cfg).unwrap();
    for t in &mut p.tensors {
        t.data_mut().fill(0.0);
    }
    let seq = MaskedSequence { tokens: vec![5, MASK, 9], positions: vec![1], labels: vec![77] };
    let (nll, _) = loss_and_grads(&p, &[seq], None).unwrap();
    assert!((nll - 4096f64.ln()).abs() < 1e-12);
    assert!((nll - 8.3178).abs() < 1e-4);
}

#[test]
fn matches_straight_line_oracle() {
    // single layer, single head, three tokens
    let p = randomized(&tiny(9, 4, 1, 1, 6, 3), 10, 0.5);
    let tokens = [5, MASK, 7];
    for pos in 0..3 {
        let fast = forward_mlm(&p, &tokens, &[pos]).unwrap();
        let slow = naive_logits(&p, &tokens, pos);
        for (a, b) in fast.data().iter().zip(&slow) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
    // deeper, multi-head, with padding
    let p = randomized(&tiny(12, 8, 2, 4, 10, 4), 11, 0.3);
    let tokens = [3, 4, MASK, 11, 8, PAD, PAD];
    let fast = forward_mlm(&p, &tokens, &[2, 4]).unwrap();
    for (r, pos) in [2, 4].into_iter().enumerate() {
        for (a, b) in fast.row(r).iter().zip(&naive_logits(&p, &tokens, pos)) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn pad_tail_does_not_change_logits() {
    let p = randomized(&tiny(12, 8, 2, 2, 10, 4), 12, 0.3);
    let base = forward_mlm(&p, &[3, MASK, 9], &[1]).unwrap();
    for tail in 1..=5 {
        let mut tokens = vec![3, MASK, 9];
        tokens.resize(3 + tail, PAD);
        let other = forward_mlm(&p, &tokens, &[1]).unwrap();
        for (a, b) in base.data().iter().zip(other.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn batched_equals_single() {
    let p = randomized(&tiny(12, 8, 2, 2, 10, 4), 13, 0.3);
    let a = MaskedSequence { tokens: vec![3, MASK, 9, 4], positions: vec![1, 3], labels: vec![5, 4] };
    let b = MaskedSequence { tokens: vec![MASK, 7], positions: vec![0], labels: vec![8] };
    let mut g = Graph::new(&p.tensors);
    let out = record_forward(&mut g, &p, &[a.clone(), b.clone()], None).unwrap();
    let batched = g.value(out).clone();
    let la = forward_mlm(&p, &a.tokens, &a.positions).unwrap();
    let lb = forward_mlm(&p, &b.tokens, &b.positions).unwrap();
    for (x, y) in batched.data().iter().zip(la.data().iter().chain(lb.data())) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn predictive_distribution_contract() {
    let p = randomized(&tiny(12, 8, 2, 2, 10, 4), 14, 0.5);
    let tokens = [3, MASK, 9];
    let dist = predictive_distribution(&p, &tokens, 1).unwrap();
    assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let logits = forward_mlm(&p, &tokens, &[1]).unwrap();
    let argmax = |v: &[f64]| (0..v.len()).max_by(|&i, &j| v[i].total_cmp(&v[j])).unwrap();
    assert_eq!(argmax(&dist), argmax(logits.data()));
    assert_eq!(predictive_distribution(&p, &tokens, 0), Err(ModelError::NotMasked(0)));
    assert!(matches!(predictive_distribution(&p, &tokens, 3), Err(ModelError::PositionOutOfRange { .. })));
    assert!(matches!(forward_mlm(&p, &[3; 9], &[0]), Err(ModelError::TooLong { .. })));
}

fn nll(p: &ModelParams, batch: &[MaskedSequence]) -> f64 {
    loss_and_grads(p, batch, None).unwrap().0
}

/// Central differences on every entry of every tensor; returns the worst
/// relative error per tensor name.
fn fd_check(p: &ModelParams, batch: &[MaskedSequence]) -> Vec<(String, f64)> {
    let (_, grads) = loss_and_grads(p, batch, None).unwrap();
    let h = 1e-5;
    let mut q = p.clone();
    let mut out = Vec::new();
    for (ti, g) in grads.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..g.len() {
            let orig = q.tensors[ti].data()[i];
            q.tensors[ti].data_mut()[i] = orig + h;
            let up = nll(&q, batch);
            q.tensors[ti].data_mut()[i] = orig - h;
            let down = nll(&q, batch);
            q.tensors[ti].data_mut()[i] = orig;
            let num = (up - down) / (2.0 * h);
            let ana = g.data()[i];
            // key biases have an exactly zero gradient (softmax shift
            // invariance); the floor keeps pure rounding noise from counting
            let denom = ana.abs().max(num.abs()).max(1e-6);
            worst = worst.max((ana - num).abs() / denom);
        }
        out.push((p.info[ti].name.clone(), worst));
    }
    out
}

#[test]
fn gradients_match_finite_differences() {
    let batch = vec![
        MaskedSequence { tokens: vec![3, MASK, 9, 4, 7], positions: vec![1, 3], labels: vec![5, 4] },
        MaskedSequence { tokens: vec![MASK, 7, 8, PAD], positions: vec![0, 2], labels: vec![8, 10] },
    ];
    for (cfg, seed) in [(tiny(12, 4, 1, 1, 6, 1), 1), (tiny(12, 8, 2, 2, 10, 2), 2)] {
        let p = randomized(&cfg, seed, 0.4);
        for (name, err) in fd_check(&p, &batch) {
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }
}

#[test]
fn one_step_descends() {
    let cfg = tiny(12, 8, 2, 2, 10, 3);
    let mut p = init_params(&cfg).unwrap();
    let batch = vec![MaskedSequence { tokens: vec![3, MASK, 9, MASK], positions: vec![1, 3], labels: vec![5, 4] }];
    let (before, grads) = loss_and_grads(&p, &batch, None).unwrap();
    for (t, g) in p.tensors.iter_mut().zip(&grads) {
        for (v, gv) in t.data_mut().iter_mut().zip(g.data()) {
            *v -= 1e-3 * gv;
        }
    }
    assert!(nll(&p, &batch) < before);
}

#[test]
fn dropout_is_seeded() {
    let cfg = ModelConfig { dropout: 0.3, ..tiny(12, 8, 1, 2, 10, 3) };
    let p = init_params(&cfg).unwrap();
    let batch = vec![MaskedSequence { tokens: vec![3, MASK, 9, 4], positions: vec![1], labels: vec![5] }];
    let run = |s| {
        let mut rng = Rng::new(s);
        loss_and_grads(&p, &batch, Some(DropoutRng(&mut rng))).unwrap().0
    };
    assert_eq!(run(1).to_bits(), run(1).to_bits());
    assert_ne!(run(1), run(2));
    // no dropout stream means no dropout
    assert_eq!(nll(&p, &batch), loss_and_grads(&p, &batch, None).unwrap().0);
}
