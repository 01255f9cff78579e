use super::*;
use crate::model::encode_checkpoint;
use crate::numeric::Tensor;
use crate::tokenize::{MASK, PAD};
use proptest::prelude::{prop, prop_assert, proptest};
use crate::numeric::Rng;

fn hyper(lr: f64, wd: f64, clip: f64) -> AdamHyper {
    AdamHyper { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: wd, clip_norm: clip }
}

#[test]
fn rate_zero_forces_one() {
    let ids: Vec<usize> = (10..20).collect();
    let s = mask_tokens(&ids, 0.0, 50, MaskPolicy::Bert, &mut Rng::new(1));
    assert_eq!(s.positions.len(), 1);
    assert_eq!(s.labels, vec![ids[s.positions[0]]]);
}

#[test]
fn rate_one_selects_all_non_pad() {
    let ids = vec![5, 6, 7, PAD, PAD];
    let s = mask_tokens(&ids, 1.0, 50, MaskPolicy::AllMask, &mut Rng::new(1));
    assert_eq!(s.positions, vec![0, 1, 2]);
    assert_eq!(s.tokens, vec![MASK, MASK, MASK, PAD, PAD]);
    assert_eq!(s.labels, vec![5, 6, 7]);
}

#[test]
fn binomial_count_and_determinism() {
    let ids: Vec<usize> = (0..1000).map(|i| 3 + i % 40).collect();
    let a = mask_tokens(&ids, 0.15, 43, MaskPolicy::Bert, &mut Rng::new(77));
    let b = mask_tokens(&ids, 0.15, 43, MaskPolicy::Bert, &mut Rng::new(77));
    assert_eq!(a, b);
    assert!((100..=200).contains(&a.positions.len()), "{}", a.positions.len());
}

#[test]
fn bert_split_proportions() {
    let ids: Vec<usize> = (0..200_000).map(|i| 3 + i % 1000).collect();
    let s = mask_tokens(&ids, 1.0, 1003, MaskPolicy::Bert, &mut Rng::new(5));
    let n = s.positions.len() as f64;
    let masked = s.positions.iter().filter(|&&p| s.tokens[p] == MASK).count() as f64 / n;
    let kept = s.positions.iter().filter(|&&p| s.tokens[p] == ids[p]).count() as f64 / n;
    assert!((masked - 0.8).abs() < 0.005, "{masked}");
    // a random replacement hits the original id 1 time in 1000
    assert!((kept - 0.1 - 0.1 / 1000.0).abs() < 0.005, "{kept}");
    assert!(s.tokens.iter().all(|&t| t == MASK || t >= 3));
}

#[test]
fn adamw_first_step() {
    let mut p = vec![Tensor::scalar(0.0)];
    let mut g = vec![Tensor::scalar(1.0)];
    let mut st = AdamState::new(&p);
    adamw_step(&mut p, &mut g, &mut st, &hyper(0.1, 0.0, 10.0), &[true]).unwrap();
    // m_hat = 1, v_hat = 1
    assert!((p[0].data()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
}

#[test]
fn clipping_scales_to_norm() {
    let mut g = vec![Tensor::from_vec(&[2], vec![3.0, 0.0]), Tensor::from_vec(&[1], vec![4.0])];
    let before = clip_global_norm(&mut g, 0.5);
    assert_eq!(before, 5.0);
    assert!((g[0].data()[0] - 0.3).abs() < 1e-15);
    assert!((g[1].data()[0] - 0.4).abs() < 1e-15);
}

#[test]
fn decoupled_decay_shrinks() {
    let mut p = vec![Tensor::from_vec(&[1, 2], vec![0.7, -0.4])];
    let mut st = AdamState::new(&p);
    for _ in 0..3 {
        let mut g = vec![Tensor::zeros(&[1, 2])];
        let before = p[0].data().to_vec();
        adamw_step(&mut p, &mut g, &mut st, &hyper(0.1, 0.01, 0.5), &[true]).unwrap();
        for (a, b) in p[0].data().iter().zip(before) {
            assert!(a.abs() < b.abs());
        }
    }
}

#[test]
fn non_finite_gradient_rejected() {
    let mut p = vec![Tensor::scalar(1.0)];
    let mut g = vec![Tensor::scalar(f64::NAN)];
    let mut st = AdamState::new(&p);
    assert!(adamw_step(&mut p, &mut g, &mut st, &hyper(0.1, 0.0, 1.0), &[false]).is_err());
    assert_eq!(p[0].data()[0], 1.0);
    assert_eq!(st.t, 0);
}

proptest! {
    #[test]
    fn clipped_norm_bounded(v in prop::collection::vec(-1e3f64..1e3, 1..40), clip in 1e-3f64..10.0) {
        let mut g = vec![Tensor::from_vec(&[v.len()], v)];
        clip_global_norm(&mut g, clip);
        prop_assert!(g[0].sum_squares().sqrt() <= clip + 1e-12);
    }
}

#[test]
fn warmup_schedule() {
    let cfg = TrainConfig { epochs: 2, sequences_per_epoch: 1000, batch_size: 10, ..TrainConfig::default() };
    assert_eq!(cfg.total_steps(), 200);
    assert!((cfg.lr_at(0) - 0.5e-4).abs() < 1e-18);
    assert_eq!(cfg.lr_at(1), 1e-4);
    assert_eq!(cfg.lr_at(150), 1e-4);
}

#[test]
fn packing_pads_tail() {
    let w = pack_windows(&[vec![3, 4, 5], vec![6, 7]], 2);
    assert_eq!(w, vec![vec![3, 4], vec![5, 6], vec![7, PAD]]);
}

#[test]
fn probes_mask_one_real_token() {
    let w = pack_windows(&[(3..40).collect()], 8);
    let probes = make_probes(&w, 4);
    assert_eq!(probes.len(), w.len());
    for (p, win) in probes.iter().zip(&w) {
        assert_eq!(p.tokens.iter().filter(|&&t| t == MASK).count(), 1);
        assert_eq!(p.tokens[p.position], MASK);
        assert_eq!(win[p.position], p.label);
        assert_ne!(p.label, PAD);
    }
    assert_eq!(probes, make_probes(&w, 4));
}

fn small_setup() -> (TrainConfig, crate::model::ModelConfig, Vec<Vec<usize>>) {
    let docs = crate::corpus::gen_grammar_text(3, 120).unwrap();
    let tok = crate::tokenize::train_bpe(&docs, 160).unwrap();
    let windows = pack_windows(&tok.encode_all(&docs), 16);
    let cfg = TrainConfig {
        data_seed: 11,
        weight_seeds: vec![5, 6],
        epochs: 5,
        sequences_per_epoch: 64,
        seq_len: 16,
        batch_size: 8,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let model = crate::model::ModelConfig {
        vocab_size: tok.vocab_size(),
        max_seq_len: 16,
        model_dim: 16,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 32,
        dropout: 0.0,
        weight_seed: 0,
    };
    (cfg, model, windows)
}

#[test]
fn batch_stream_is_pure() {
    let (cfg, model, windows) = small_setup();
    let a = BatchStream::new(windows.clone(), &cfg, model.vocab_size).unwrap();
    let b = BatchStream::new(windows, &cfg, model.vocab_size).unwrap();
    for e in 0..2 {
        for i in 0..a.batches_per_epoch() {
            assert_eq!(a.batch(e, i), b.batch(e, i));
        }
    }
    assert_ne!(a.batch(0, 0), a.batch(1, 0));
    let total: usize = (0..a.batches_per_epoch()).map(|i| a.batch(0, i).len()).sum();
    assert_eq!(total, 64);
}

#[test]
fn ensemble_determinism_and_progress() {
    let (cfg, model, windows) = small_setup();
    let id = RunIdentity::default();
    let same = TrainConfig { weight_seeds: vec![5, 5], ..cfg.clone() };
    let r = train_ensemble(&same, &model, windows.clone(), &id, None).unwrap();
    // identical apart from the member index in the header
    let mut c1 = r[1].checkpoint.clone();
    c1.meta.member = 0;
    assert_eq!(encode_checkpoint(&r[0].checkpoint), encode_checkpoint(&c1));

    let r = train_ensemble(&cfg, &model, windows, &id, None).unwrap();
    assert_ne!(r[0].checkpoint.params.tensors, r[1].checkpoint.params.tensors);
    let first: f64 = r.iter().map(|m| m.log[0].mean_loss).sum::<f64>() / 2.0;
    let last: f64 = r.iter().map(|m| m.log[4].mean_loss).sum::<f64>() / 2.0;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn resumes_finished_members() {
    let (cfg, model, windows) = small_setup();
    let cfg = TrainConfig { epochs: 1, ..cfg };
    let dir = tempfile::tempdir().unwrap();
    let id = RunIdentity { tokenizer_hash: "t".into(), config_hash: "c".into() };
    let a = train_ensemble(&cfg, &model, windows.clone(), &id, Some(dir.path())).unwrap();
    assert!(a.iter().all(|m| !m.resumed));
    std::fs::remove_file(member_path(dir.path(), 1)).unwrap();
    let b = train_ensemble(&cfg, &model, windows, &id, Some(dir.path())).unwrap();
    assert!(b[0].resumed && !b[1].resumed);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.checkpoint, y.checkpoint);
    }
    assert_eq!(load_ensemble(dir.path(), 2).unwrap()[1], a[1].checkpoint);
}

#[test]
fn rejects_bad_config() {
    let (cfg, model, windows) = small_setup();
    let bad = TrainConfig { weight_seeds: vec![], ..cfg.clone() };
    assert!(train_ensemble(&bad, &model, windows.clone(), &RunIdentity::default(), None).is_err());
    let bad = TrainConfig { mask_rate: 1.5, ..cfg };
    assert!(bad.validate().is_err());
}
