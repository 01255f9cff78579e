use super::*;
use crate::model::{init_params, ModelConfig};
use crate::numeric::{Rng, Tensor};
use crate::tokenize::MASK;
use proptest::prelude::{prop_assert_eq, proptest};

fn emb(rows: &[&[f64]]) -> EmbeddingMatrix {
    let d = rows[0].len();
    EmbeddingMatrix::new(Tensor::from_vec(&[rows.len(), d], rows.concat()), &[])
}

fn on_circle(angles: &[f64]) -> EmbeddingMatrix {
    let rows: Vec<Vec<f64>> = angles.iter().map(|a| vec![a.cos(), a.sin()]).collect();
    emb(&rows.iter().map(|r| r.as_slice()).collect::<Vec<_>>())
}

fn random_emb(rng: &mut Rng, v: usize, d: usize) -> EmbeddingMatrix {
    let data = (0..v * d).map(|_| rng.normal()).collect();
    EmbeddingMatrix::new(Tensor::from_vec(&[v, d], data), &[])
}

fn ids(v: Vec<(usize, f64)>) -> Vec<usize> {
    v.into_iter().map(|x| x.0).collect()
}

#[test]
fn curve_degenerate_cases() {
    let p = Distribution::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let same = vec![vec![p.clone(), p.clone(), p.clone()]; 3];
    for pt in js_curve_from_distributions(&same, &[0.3, 0.9, 1.0]).unwrap() {
        assert_eq!(pt.mean_js, 0.0);
    }
    let disjoint = vec![vec![Distribution::one_hot(4, 0), Distribution::one_hot(4, 3)]; 5];
    for pt in js_curve_from_distributions(&disjoint, &[0.3, 1.0]).unwrap() {
        assert_eq!(pt.mean_js, 1.0);
        assert_eq!(pt.stderr, 0.0);
        assert_eq!(pt.n_probes, 5);
    }
}

#[test]
fn truncation_amplifies_small_differences() {
    let e = 0.005;
    let p = Distribution::new(vec![0.25 + e, 0.25, 0.25 - e, 0.25]).unwrap();
    let q = Distribution::new(vec![0.25 - e, 0.25, 0.25 + e, 0.25]).unwrap();
    let c = js_curve_from_distributions(&[vec![p.clone(), q.clone()]], &[0.3, 1.0]).unwrap();
    // p keeps {0, 1}, q keeps {2, 1}
    assert!(c[1].mean_js < 0.02, "{}", c[1].mean_js);
    assert!(c[0].mean_js > c[1].mean_js);
    let direct = js_distance(&nucleus_truncate(&p, 0.3), &nucleus_truncate(&q, 0.3));
    assert_eq!(c[0].mean_js, direct);
}

#[test]
fn identical_models_have_zero_curve() {
    let cfg = ModelConfig {
        vocab_size: 20,
        max_seq_len: 8,
        model_dim: 8,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 8,
        dropout: 0.0,
        weight_seed: 4,
    };
    let p = init_params(&cfg).unwrap();
    let probes = crate::train::make_probes(&[vec![3, 4, 5, 6], vec![7, 8, 9]], 1);
    let a = analyze_probes(&[&p, &p], &probes, &[0.5, 1.0]).unwrap();
    assert!(a.js_curve.iter().all(|pt| pt.mean_js == 0.0));
    assert_eq!(KlSummary { member: 1, ..a.kl[0].clone() }, a.kl[1]);
    assert!(a.ensemble_mean_kl_bits >= 0.0);
    assert_eq!(ensemble_js_curve(&[&p], &probes, &[1.0]), Err(MetricsError::TooFewMembers(1)));
    let q = init_params(&ModelConfig { weight_seed: 5, ..cfg }).unwrap();
    assert!(ensemble_js_curve(&[&p, &q], &probes, &[1.0]).unwrap()[0].mean_js > 0.0);
    let mut unmasked = probes[0].clone();
    unmasked.tokens[unmasked.position] = 3;
    assert!(analyze_probes(&[&p], &[unmasked], &[1.0]).is_err());
    assert_eq!(probes[0].tokens[probes[0].position], MASK);
}

#[test]
fn knn_duplicates_and_ties() {
    let e = emb(&[&[1.0, 0.0], &[0.3, 0.9], &[1.0, 0.0], &[0.5, 0.5]]);
    let n = knn(&e, 0, 2).unwrap();
    assert_eq!(n[0].0, 2);
    assert!((n[0].1 - 1.0).abs() < 1e-15);
    let eye = emb(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 0.0, 1.0]]);
    assert_eq!(ids(knn(&eye, 2, 3).unwrap()), vec![0, 1, 3]);
    assert!(knn(&eye, 2, 0).unwrap().is_empty());
    assert_eq!(knn(&eye, 2, 4), Err(MetricsError::KTooLarge { k: 4, vocab: 4 }));
}

#[test]
fn knn_errors() {
    let e = EmbeddingMatrix::new(Tensor::from_vec(&[3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]), &[2]);
    assert_eq!(knn(&e, 0, 1), Err(MetricsError::ZeroNorm(0)));
    assert_eq!(knn(&e, 2, 1), Err(MetricsError::ExcludedToken(2)));
    assert_eq!(knn(&e, 7, 1), Err(MetricsError::UnknownToken(7)));
    // zero and excluded rows are never neighbors
    assert!(knn(&e, 1, 2).unwrap().is_empty());
    assert_eq!(knn(&e, 1, 5), Err(MetricsError::KTooLarge { k: 5, vocab: 3 }));
}

fn brute_knn(rows: &[Vec<f64>], t: usize, k: usize) -> Vec<usize> {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let mut all: Vec<(usize, f64)> = (0..rows.len()).filter(|&j| j != t).map(|j| (j, cos(&rows[t], &rows[j]))).collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.into_iter().take(k).map(|x| x.0).collect()
}

#[test]
fn knn_five_point_hand_set() {
    let rows = vec![vec![1.0, 0.0], vec![1.0, 0.2], vec![0.0, 1.0], vec![-1.0, 0.1], vec![0.7, 0.7]];
    let e = emb(&rows.iter().map(|r| r.as_slice()).collect::<Vec<_>>());
    // cosines from 0: 1 -> 0.981, 4 -> 0.707, 2 -> 0, 3 -> -0.995
    assert_eq!(ids(knn(&e, 0, 4).unwrap()), vec![1, 4, 2, 3]);
    for t in 0..5 {
        assert_eq!(ids(knn(&e, t, 4).unwrap()), brute_knn(&rows, t, 4));
    }
}

proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
    #[test]
    fn knn_matches_brute_force(seed in 0u64..1000, v in 2usize..200, k in 1usize..12) {
        let mut rng = Rng::new(seed);
        let rows: Vec<Vec<f64>> = (0..v).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let e = emb(&rows.iter().map(|r| r.as_slice()).collect::<Vec<_>>());
        let t = seed as usize % v;
        if k < v {
            prop_assert_eq!(ids(knn(&e, t, k).unwrap()), brute_knn(&rows, t, k));
        } else {
            prop_assert_eq!(knn(&e, t, k), Err(MetricsError::KTooLarge { k, vocab: v }));
        }
    }
}

#[test]
fn jaccard_examples() {
    let a = on_circle(&[0.0, 0.1, 0.2, 0.3, 2.0, 2.5]);
    let b = on_circle(&[0.0, 2.0, 2.5, 0.1, 0.2, 0.3]);
    assert_eq!(ids(knn(&a, 0, 3).unwrap()), vec![1, 2, 3]);
    assert_eq!(ids(knn(&b, 0, 3).unwrap()), vec![3, 4, 5]);
    assert!((token_jaccard(&a, &b, 0, 3).unwrap() - 0.2).abs() < 1e-15);
    assert_eq!(topk_jaccard(&a, &a, 3), 1.0);
    // saturation: every other token is a neighbor
    assert_eq!(topk_jaccard(&a, &b, 5), 1.0);
    assert_eq!(topk_jaccard(&a, &b, 2), topk_jaccard(&b, &a, 2));
}

#[test]
fn spearman_examples() {
    let a = on_circle(&[0.0, 0.1, 0.3]);
    // token 1 and 2 swap places: every neighbor order reverses
    let b = on_circle(&[0.0, 0.3, 0.1]);
    assert_eq!(local_spearman(&a, &a, 2).mean, Some(1.0));
    let s = local_spearman(&a, &b, 2);
    assert_eq!(s.mean, Some(-1.0));
    assert_eq!((s.defined, s.skipped), (6, 0));

    let mut rng = Rng::new(8);
    let (x, y) = (random_emb(&mut rng, 500, 16), random_emb(&mut rng, 500, 16));
    let m = local_spearman(&x, &y, 10).mean.unwrap();
    assert!(m.abs() < 0.1, "{m}");
    // k = 1 has no rank variance
    assert_eq!(local_spearman(&x, &y, 1).mean, None);
}

fn random_orthogonal(rng: &mut Rng, d: usize) -> Tensor {
    let g = Tensor::from_vec(&[d, d], (0..d * d).map(|_| rng.normal()).collect());
    let s = crate::numeric::svd_small(&g).unwrap();
    s.u.matmul(&s.vt)
}

#[test]
fn procrustes_recovers_similarity_transforms() {
    let mut rng = Rng::new(3);
    let a = random_emb(&mut rng, 100, 8);
    let r = procrustes(&a, &a).unwrap();
    assert!(r.disparity < 1e-12 && (r.cosine - 1.0).abs() < 1e-12);
    let q = random_orthogonal(&mut rng, 8);
    let mut t = a.table().matmul(&q);
    let shift: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
    for i in 0..100 {
        for j in 0..8 {
            t.set2(i, j, (t.get2(i, j) + shift[j]) * 5.0);
        }
    }
    let b = EmbeddingMatrix::new(t, &[]);
    let r = procrustes(&a, &b).unwrap();
    assert!(r.disparity < 1e-10, "{}", r.disparity);
    assert!(r.cosine > 1.0 - 1e-10);
}

#[test]
fn procrustes_beats_random_rotations_and_is_symmetric() {
    let mut rng = Rng::new(4);
    let (a, b) = (random_emb(&mut rng, 100, 8), random_emb(&mut rng, 100, 8));
    let r = procrustes(&a, &b).unwrap();
    assert!((0.0..=1.0).contains(&r.disparity));
    assert!((r.disparity - procrustes(&b, &a).unwrap().disparity).abs() < 1e-12);
    let std = |e: &EmbeddingMatrix| {
        let mut t = e.table().clone();
        for j in 0..8 {
            let m = (0..100).map(|i| t.get2(i, j)).sum::<f64>() / 100.0;
            for i in 0..100 {
                t.set2(i, j, t.get2(i, j) - m);
            }
        }
        let n = t.sum_squares().sqrt();
        t.scale(1.0 / n);
        t
    };
    let (sa, sb) = (std(&a), std(&b));
    for _ in 0..100 {
        let rb = sb.matmul(&random_orthogonal(&mut rng, 8));
        let resid: f64 = sa.data().iter().zip(rb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!(r.disparity <= resid);
    }
}

#[test]
fn procrustes_invariances() {
    let mut rng = Rng::new(5);
    let (a, b) = (random_emb(&mut rng, 60, 6), random_emb(&mut rng, 60, 6));
    let base = procrustes(&a, &b).unwrap().disparity;
    let q = random_orthogonal(&mut rng, 6);
    let mut moved = b.table().matmul(&q);
    moved.scale(0.3);
    for i in 0..60 {
        moved.set2(i, 2, moved.get2(i, 2) - 4.0);
    }
    let d = procrustes(&a, &EmbeddingMatrix::new(moved, &[])).unwrap().disparity;
    assert!((d - base).abs() < 1e-12);
}

#[test]
fn table_over_pairs() {
    let mut rng = Rng::new(6);
    let ms: Vec<EmbeddingMatrix> = (0..3).map(|_| random_emb(&mut rng, 40, 4)).collect();
    let t = agreement_table(&ms, &[1, 5, 10]).unwrap();
    assert_eq!(t.pairs.iter().map(|p| (p.i, p.j)).collect::<Vec<_>>(), vec![(0, 1), (0, 2), (1, 2)]);
    let mean10 = t.pairs.iter().map(|p| p.jaccard[2].value.unwrap()).sum::<f64>() / 3.0;
    assert!((t.mean_jaccard[2].value.unwrap() - mean10).abs() < 1e-15);
    assert_eq!(t.mean_spearman[0].value, None);

    let same = vec![ms[0].clone(), ms[0].clone()];
    let t = agreement_table(&same, &[5]).unwrap();
    assert_eq!(t.mean_jaccard[0].value, Some(1.0));
    assert!(t.mean_procrustes_disparity < 1e-12);
    assert!(agreement_table(&same[..1], &[5]).is_err());
}
