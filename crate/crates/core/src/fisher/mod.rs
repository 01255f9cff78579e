//! Diagonal empirical Fisher information and its split across layer groups.

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::model::{log_prob_grad, LayerGroup, ModelError, ModelParams};
use crate::numeric::Tensor;
use crate::train::ProbeSample;

#[derive(Debug, Error, PartialEq)]
pub enum FisherError {
    #[error("no usable probes ({skipped} skipped)")]
    NoProbes { skipped: usize },
    #[error("need at least one member")]
    NoMembers,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mean of squared log-likelihood gradients, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag {
    pub tensors: Vec<Tensor>,
    pub count: usize,
    pub skipped: usize,
}

/// Mean over probes of the elementwise squared gradient of
/// `log P(label | tokens)`. Identical probes are evaluated once and
/// weighted by multiplicity, so duplicating the probe set changes nothing.
/// Probes with a non-finite gradient are skipped and counted.
pub fn fisher_diag(params: &ModelParams, probes: &[ProbeSample]) -> Result<FisherDiag, FisherError> {
    let mut unique: Vec<(&ProbeSample, f64)> = Vec::new();
    let mut seen: HashMap<&ProbeSample, usize> = HashMap::new();
    for p in probes {
        match seen.get(p) {
            Some(&i) => unique[i].1 += 1.0,
            None => {
                seen.insert(p, unique.len());
                unique.push((p, 1.0));
            }
        }
    }
    let mut acc: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let (mut weight, mut count, mut skipped) = (0.0, 0usize, 0usize);
    for (p, w) in unique {
        let (_, grads) = log_prob_grad(params, &p.tokens, p.position, p.label)?;
        if !grads.iter().all(Tensor::is_finite) {
            skipped += w as usize;
            continue;
        }
        for (a, g) in acc.iter_mut().zip(&grads) {
            for (x, gv) in a.data_mut().iter_mut().zip(g.data()) {
                *x += w * (gv * gv);
            }
        }
        weight += w;
        count += w as usize;
    }
    if count == 0 {
        return Err(FisherError::NoProbes { skipped });
    }
    for a in &mut acc {
        for x in a.data_mut() {
            *x /= weight;
        }
    }
    Ok(FisherDiag { tensors: acc, count, skipped })
}

/// Unnormalized Fisher mass per group and per layer slot.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FisherSums {
    pub groups: [f64; 3],
    pub layers: Vec<(usize, LayerGroup, f64)>,
}

pub fn group_sums(fd: &FisherDiag, params: &ModelParams) -> FisherSums {
    assert_eq!(fd.tensors.len(), params.tensors.len(), "Fisher diagonal does not cover every tensor");
    let mut groups = [0.0; 3];
    let mut layers: Vec<(usize, LayerGroup, f64)> = Vec::new();
    for (t, info) in fd.tensors.iter().zip(&params.info) {
        let s = t.sum();
        groups[info.group.index()] += s;
        match layers.last_mut() {
            Some(l) if l.0 == info.layer => l.2 += s,
            _ => layers.push((info.layer, info.group, s)),
        }
    }
    FisherSums { groups, layers }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerShare {
    pub layer: usize,
    pub group: LayerGroup,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FisherShares {
    pub embeddings: f64,
    pub transformer: f64,
    pub head: f64,
    pub layers: Vec<LayerShare>,
}

impl FisherShares {
    pub fn group(&self, g: LayerGroup) -> f64 {
        match g {
            LayerGroup::Embeddings => self.embeddings,
            LayerGroup::Transformer => self.transformer,
            LayerGroup::Head => self.head,
        }
    }
}

/// Normalized shares; `None` when the total mass is zero.
pub fn normalize(s: &FisherSums) -> Option<FisherShares> {
    let total: f64 = s.groups.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    Some(FisherShares {
        embeddings: s.groups[0] / total,
        transformer: s.groups[1] / total,
        head: s.groups[2] / total,
        layers: s.layers.iter().map(|&(layer, group, v)| LayerShare { layer, group, share: v / total }).collect(),
    })
}

pub fn group_aggregate(fd: &FisherDiag, params: &ModelParams) -> Option<FisherShares> {
    normalize(&group_sums(fd, params))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleFisher {
    pub members: Vec<Option<FisherShares>>,
    pub ensemble: Option<FisherShares>,
    pub probes_used: Vec<usize>,
    pub probes_skipped: Vec<usize>,
}

/// Averages unnormalized group and layer sums over members, then
/// normalizes once.
pub fn average_sums(sums: &[FisherSums]) -> FisherSums {
    let n = sums.len() as f64;
    let mut groups = [0.0; 3];
    let mut layers = sums[0].layers.clone();
    for l in &mut layers {
        l.2 = 0.0;
    }
    for s in sums {
        for g in 0..3 {
            groups[g] += s.groups[g];
        }
        for (acc, l) in layers.iter_mut().zip(&s.layers) {
            acc.2 += l.2;
        }
    }
    for g in &mut groups {
        *g /= n;
    }
    for l in &mut layers {
        l.2 /= n;
    }
    FisherSums { groups, layers }
}

pub fn ensemble_fisher(members: &[&ModelParams], probes: &[ProbeSample]) -> Result<EnsembleFisher, FisherError> {
    if members.is_empty() {
        return Err(FisherError::NoMembers);
    }
    let mut sums = Vec::new();
    let mut used = Vec::new();
    let mut skipped = Vec::new();
    for m in members {
        let fd = fisher_diag(m, probes)?;
        used.push(fd.count);
        skipped.push(fd.skipped);
        sums.push(group_sums(&fd, m));
    }
    Ok(EnsembleFisher {
        members: sums.iter().map(normalize).collect(),
        ensemble: normalize(&average_sums(&sums)),
        probes_used: used,
        probes_skipped: skipped,
    })
}
