//! Agreement between static embedding tables.

use serde::Serialize;

use super::MetricsError;
use crate::model::ModelParams;
use crate::numeric::{spearman, svd_small, Tensor};
use crate::tokenize::N_SPECIAL;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    table: Tensor,
    excluded: Vec<bool>,
    unit: Vec<Option<Vec<f64>>>,
}

impl EmbeddingMatrix {
    pub fn new(table: Tensor, excluded_ids: &[usize]) -> Self {
        assert_eq!(table.shape().len(), 2, "embedding table must be a matrix");
        let mut excluded = vec![false; table.rows()];
        for &i in excluded_ids {
            excluded[i] = true;
        }
        let unit = (0..table.rows())
            .map(|i| {
                let r = table.row(i);
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                (n > 0.0).then(|| r.iter().map(|v| v / n).collect())
            })
            .collect();
        Self { table, excluded, unit }
    }

    /// Token embedding table of a model with the special ids excluded.
    pub fn from_params(p: &ModelParams) -> Self {
        let specials: Vec<usize> = (0..N_SPECIAL.min(p.config.vocab_size)).collect();
        Self::new(p.token_embeddings().clone(), &specials)
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn is_excluded(&self, id: usize) -> bool {
        self.excluded[id]
    }

    /// Non-excluded ids with a nonzero row.
    pub fn candidates(&self) -> Vec<usize> {
        (0..self.vocab_size()).filter(|&i| !self.excluded[i] && self.unit[i].is_some()).collect()
    }

    pub fn cosine(&self, i: usize, j: usize) -> Option<f64> {
        let (a, b) = (self.unit[i].as_ref()?, self.unit[j].as_ref()?);
        Some(a.iter().zip(b).map(|(x, y)| x * y).sum())
    }

    fn check_query(&self, token: usize) -> Result<(), MetricsError> {
        if token >= self.vocab_size() {
            return Err(MetricsError::UnknownToken(token));
        }
        if self.excluded[token] {
            return Err(MetricsError::ExcludedToken(token));
        }
        if self.unit[token].is_none() {
            return Err(MetricsError::ZeroNorm(token));
        }
        Ok(())
    }
}

/// Top-`k` neighbors of `token` by cosine similarity, descending, ties by
/// ascending id. Excluded ids, the token itself and zero rows never appear.
pub fn knn(e: &EmbeddingMatrix, token: usize, k: usize) -> Result<Vec<(usize, f64)>, MetricsError> {
    e.check_query(token)?;
    if k >= e.vocab_size() {
        return Err(MetricsError::KTooLarge { k, vocab: e.vocab_size() });
    }
    let mut scored: Vec<(usize, f64)> = e
        .candidates()
        .into_iter()
        .filter(|&j| j != token)
        .map(|j| (j, e.cosine(token, j).unwrap()))
        .collect();
    let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    let k = k.min(scored.len());
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    Ok(scored)
}

/// Neighbor lists of every candidate token up to depth `k`; shorter depths
/// are prefixes.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    pub k: usize,
    lists: Vec<Option<Vec<usize>>>,
}

impl NeighborTable {
    pub fn build(e: &EmbeddingMatrix, k: usize) -> Self {
        let mut lists = vec![None; e.vocab_size()];
        for t in e.candidates() {
            lists[t] = Some(knn(e, t, k).expect("candidate is queryable").into_iter().map(|(j, _)| j).collect());
        }
        Self { k, lists }
    }

    pub fn get(&self, token: usize, k: usize) -> Option<&[usize]> {
        assert!(k <= self.k);
        self.lists[token].as_deref().map(|l| &l[..k.min(l.len())])
    }
}

fn shared_tokens(a: &NeighborTable, b: &NeighborTable) -> Vec<usize> {
    assert_eq!(a.lists.len(), b.lists.len(), "vocabularies differ");
    (0..a.lists.len()).filter(|&t| a.lists[t].is_some() && b.lists[t].is_some()).collect()
}

fn jaccard_tables(a: &NeighborTable, b: &NeighborTable, k: usize) -> f64 {
    let tokens = shared_tokens(a, b);
    let mut total = 0.0;
    let mut mark = vec![false; a.lists.len()];
    for &t in &tokens {
        let (na, nb) = (a.get(t, k).unwrap(), b.get(t, k).unwrap());
        for &j in na {
            mark[j] = true;
        }
        let inter = nb.iter().filter(|&&j| mark[j]).count();
        for &j in na {
            mark[j] = false;
        }
        let union = na.len() + nb.len() - inter;
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    total / tokens.len().max(1) as f64
}

/// |knn_a(t) ∩ knn_b(t)| / |knn_a(t) ∪ knn_b(t)| for one token.
pub fn token_jaccard(a: &EmbeddingMatrix, b: &EmbeddingMatrix, token: usize, k: usize) -> Result<f64, MetricsError> {
    let na: Vec<usize> = knn(a, token, k)?.into_iter().map(|x| x.0).collect();
    let nb: Vec<usize> = knn(b, token, k)?.into_iter().map(|x| x.0).collect();
    let inter = na.iter().filter(|j| nb.contains(j)).count();
    let union = na.len() + nb.len() - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean over tokens of |knn_a ∩ knn_b| / |knn_a ∪ knn_b|.
pub fn topk_jaccard(a: &EmbeddingMatrix, b: &EmbeddingMatrix, k: usize) -> f64 {
    jaccard_tables(&NeighborTable::build(a, k), &NeighborTable::build(b, k), k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpearmanSummary {
    pub mean: Option<f64>,
    pub defined: usize,
    pub skipped: usize,
}

fn directional_spearman(ea: &EmbeddingMatrix, eb: &EmbeddingMatrix, na: &NeighborTable, k: usize) -> (f64, usize, usize) {
    let (mut sum, mut defined, mut skipped) = (0.0, 0, 0);
    for t in 0..ea.vocab_size() {
        let Some(neigh) = na.get(t, k) else { continue };
        let da: Vec<f64> = neigh.iter().map(|&j| 1.0 - ea.cosine(t, j).unwrap()).collect();
        let db: Option<Vec<f64>> = neigh.iter().map(|&j| eb.cosine(t, j).map(|c| 1.0 - c)).collect();
        match db.filter(|_| neigh.len() >= 2).and_then(|db| spearman(&da, &db)) {
            Some(r) => {
                sum += r;
                defined += 1;
            }
            None => skipped += 1,
        }
    }
    (sum, defined, skipped)
}

fn spearman_tables(
    a: &EmbeddingMatrix,
    b: &EmbeddingMatrix,
    na: &NeighborTable,
    nb: &NeighborTable,
    k: usize,
) -> SpearmanSummary {
    let (s1, d1, k1) = directional_spearman(a, b, na, k);
    let (s2, d2, k2) = directional_spearman(b, a, nb, k);
    let mean = match (d1, d2) {
        (0, 0) => None,
        (0, _) => Some(s2 / d2 as f64),
        (_, 0) => Some(s1 / d1 as f64),
        _ => Some(0.5 * (s1 / d1 as f64 + s2 / d2 as f64)),
    };
    SpearmanSummary { mean, defined: d1 + d2, skipped: k1 + k2 }
}

/// Per token, the Spearman correlation between the two models' cosine
/// distances to the first model's `k` nearest neighbors; averaged over
/// tokens, then over both directions.
pub fn local_spearman(a: &EmbeddingMatrix, b: &EmbeddingMatrix, k: usize) -> SpearmanSummary {
    spearman_tables(a, b, &NeighborTable::build(a, k), &NeighborTable::build(b, k), k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProcrustesResult {
    pub cosine: f64,
    pub disparity: f64,
}

/// Center columns and scale to unit Frobenius norm.
fn standardize(m: &Tensor) -> Result<Tensor, MetricsError> {
    let (n, d) = (m.rows(), m.cols());
    let mut out = m.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| m.get2(i, j)).sum::<f64>() / n as f64;
        for i in 0..n {
            out.set2(i, j, m.get2(i, j) - mean);
        }
    }
    let norm = out.sum_squares().sqrt();
    if !(norm > 0.0) {
        return Err(MetricsError::Degenerate("all embedding rows coincide".into()));
    }
    out.scale(1.0 / norm);
    Ok(out)
}

fn rows_of(e: &EmbeddingMatrix, ids: &[usize]) -> Tensor {
    let d = e.table.cols();
    let mut out = Tensor::zeros(&[ids.len(), d]);
    for (r, &i) in ids.iter().enumerate() {
        out.row_mut(r).copy_from_slice(e.table.row(i));
    }
    out
}

/// Full Procrustes analysis of `b` onto `a` over the non-excluded rows:
/// standardization, optimal orthogonal map (reflections allowed) and
/// optimal scale. Disparity is the residual sum of squares; cosine is the
/// mean row-wise cosine after alignment.
pub fn procrustes(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<ProcrustesResult, MetricsError> {
    assert_eq!(a.table.shape(), b.table.shape(), "embedding shapes differ");
    let ids: Vec<usize> = (0..a.vocab_size()).filter(|&i| !a.excluded[i] && !b.excluded[i]).collect();
    if ids.len() < 2 {
        return Err(MetricsError::Degenerate("fewer than two rows".into()));
    }
    let sa = standardize(&rows_of(a, &ids))?;
    let sb = standardize(&rows_of(b, &ids))?;
    let m = sb.transpose().matmul(&sa);
    let svd = svd_small(&m).map_err(|e| MetricsError::Svd(e.to_string()))?;
    let rot = svd.u.matmul(&svd.vt);
    let scale: f64 = svd.s.iter().sum();
    let mut aligned = sb.matmul(&rot);
    aligned.scale(scale);
    let disparity: f64 = sa.data().iter().zip(aligned.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    let (mut cos_sum, mut n) = (0.0, 0usize);
    for r in 0..ids.len() {
        let (x, y) = (sa.row(r), aligned.row(r));
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nx > 0.0 && ny > 0.0 {
            cos_sum += x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (nx * ny);
            n += 1;
        }
    }
    let cosine = if n == 0 { f64::NAN } else { cos_sum / n as f64 };
    Ok(ProcrustesResult { cosine, disparity })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KValue {
    pub k: usize,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairAgreement {
    pub i: usize,
    pub j: usize,
    pub jaccard: Vec<KValue>,
    pub spearman: Vec<KValue>,
    pub spearman_skipped: Vec<usize>,
    pub procrustes_cosine: f64,
    pub procrustes_disparity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementTable {
    pub pairs: Vec<PairAgreement>,
    pub mean_jaccard: Vec<KValue>,
    pub mean_spearman: Vec<KValue>,
    pub mean_procrustes_cosine: f64,
    pub mean_procrustes_disparity: f64,
}

fn mean_opt(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// All unordered member pairs over the k-grid, plus means over pairs.
pub fn agreement_table(members: &[EmbeddingMatrix], k_grid: &[usize]) -> Result<AgreementTable, MetricsError> {
    if members.len() < 2 {
        return Err(MetricsError::TooFewMembers(members.len()));
    }
    let kmax = k_grid.iter().copied().max().unwrap_or(0);
    let tables: Vec<NeighborTable> = members.iter().map(|e| NeighborTable::build(e, kmax)).collect();
    let mut pairs = Vec::new();
    for i in 0..members.len() {
        for j in i + 1..members.len() {
            let (a, b) = (&members[i], &members[j]);
            let jaccard = k_grid.iter().map(|&k| KValue { k, value: Some(jaccard_tables(&tables[i], &tables[j], k)) }).collect();
            let sp: Vec<SpearmanSummary> =
                k_grid.iter().map(|&k| spearman_tables(a, b, &tables[i], &tables[j], k)).collect();
            let pr = procrustes(a, b)?;
            pairs.push(PairAgreement {
                i,
                j,
                jaccard,
                spearman: k_grid.iter().zip(&sp).map(|(&k, s)| KValue { k, value: s.mean }).collect(),
                spearman_skipped: sp.iter().map(|s| s.skipped).collect(),
                procrustes_cosine: pr.cosine,
                procrustes_disparity: pr.disparity,
            });
        }
    }
    let per_k = |f: &dyn Fn(&PairAgreement, usize) -> Option<f64>| -> Vec<KValue> {
        k_grid
            .iter()
            .enumerate()
            .map(|(ki, &k)| KValue { k, value: mean_opt(pairs.iter().map(|p| f(p, ki))) })
            .collect()
    };
    let mean_jaccard = per_k(&|p, ki| p.jaccard[ki].value);
    let mean_spearman = per_k(&|p, ki| p.spearman[ki].value);
    let n = pairs.len() as f64;
    Ok(AgreementTable {
        mean_procrustes_cosine: pairs.iter().map(|p| p.procrustes_cosine).sum::<f64>() / n,
        mean_procrustes_disparity: pairs.iter().map(|p| p.procrustes_disparity).sum::<f64>() / n,
        pairs,
        mean_jaccard,
        mean_spearman,
    })
}
