//! Agreement statistics: entropy of predictions, Jensen-Shannon distance
//! under nucleus truncation, and static-embedding agreement.

mod distribution;
mod embedding;

pub use distribution::{js_distance, kl_to_uniform, nucleus_truncate, Distribution};
pub use embedding::{
    agreement_table, knn, local_spearman, procrustes, token_jaccard, topk_jaccard, AgreementTable, EmbeddingMatrix, KValue,
    NeighborTable, PairAgreement, ProcrustesResult, SpearmanSummary,
};

use serde::Serialize;
use thiserror::Error;

use crate::model::{predictive_distribution, ModelError, ModelParams};
use crate::train::ProbeSample;
use distribution::{nucleus_order, truncate_with_order};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("token {0} is not in the vocabulary")]
    UnknownToken(usize),
    #[error("token {0} is excluded from embedding statistics")]
    ExcludedToken(usize),
    #[error("token {0} has a zero embedding row")]
    ZeroNorm(usize),
    #[error("k = {k} must be below the vocabulary size {vocab}")]
    KTooLarge { k: usize, vocab: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("svd failed: {0}")]
    Svd(String),
    #[error("need at least 2 members, got {0}")]
    TooFewMembers(usize),
    #[error("no probes")]
    NoProbes,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JsPoint {
    pub p: f64,
    pub mean_js: f64,
    pub stderr: f64,
    pub n_probes: usize,
}

/// Mean and standard error over probes of per-probe values.
fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-probe mean over member pairs of the distance after truncating each
/// member's distribution at every mass in `grid`. `out[g]` receives one
/// value per call.
fn probe_js(dists: &[Distribution], grid: &[f64], out: &mut [Vec<f64>]) {
    let orders: Vec<Vec<usize>> = dists.iter().map(|d| nucleus_order(d.probs())).collect();
    for (g, &mass) in grid.iter().enumerate() {
        let t: Vec<Distribution> = dists.iter().zip(&orders).map(|(d, o)| truncate_with_order(d, o, mass)).collect();
        let (mut sum, mut n) = (0.0, 0usize);
        for i in 0..t.len() {
            for j in i + 1..t.len() {
                sum += js_distance(&t[i], &t[j]);
                n += 1;
            }
        }
        out[g].push(sum / n as f64);
    }
}

fn check_grid(grid: &[f64]) {
    assert!(grid.iter().all(|&p| p > 0.0 && p <= 1.0), "nucleus masses must lie in (0, 1]");
}

/// JS curve from precomputed distributions, `dists[probe][member]`.
pub fn js_curve_from_distributions(dists: &[Vec<Distribution>], grid: &[f64]) -> Result<Vec<JsPoint>, MetricsError> {
    check_grid(grid);
    if dists.is_empty() {
        return Err(MetricsError::NoProbes);
    }
    let mut per = vec![Vec::with_capacity(dists.len()); grid.len()];
    for probe in dists {
        if probe.len() < 2 {
            return Err(MetricsError::TooFewMembers(probe.len()));
        }
        probe_js(probe, grid, &mut per);
    }
    Ok(curve(grid, &per))
}

fn curve(grid: &[f64], per: &[Vec<f64>]) -> Vec<JsPoint> {
    grid.iter()
        .zip(per)
        .map(|(&p, v)| {
            let (mean_js, stderr) = mean_stderr(v);
            JsPoint { p, mean_js, stderr, n_probes: v.len() }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KlSummary {
    pub member: usize,
    pub mean_kl_bits: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeAnalysis {
    pub kl: Vec<KlSummary>,
    pub ensemble_mean_kl_bits: f64,
    pub js_curve: Vec<JsPoint>,
}

/// One pass over the probes: KL-to-uniform per member and, for two or more
/// members, the ensemble JS curve.
pub fn analyze_probes(members: &[&ModelParams], probes: &[ProbeSample], grid: &[f64]) -> Result<ProbeAnalysis, MetricsError> {
    check_grid(grid);
    if probes.is_empty() {
        return Err(MetricsError::NoProbes);
    }
    if members.is_empty() {
        return Err(MetricsError::TooFewMembers(0));
    }
    let mut kl = vec![Vec::with_capacity(probes.len()); members.len()];
    let mut per = vec![Vec::with_capacity(probes.len()); grid.len()];
    for probe in probes {
        let dists = members
            .iter()
            .map(|m| Ok(Distribution::new_unchecked(predictive_distribution(m, &probe.tokens, probe.position)?)))
            .collect::<Result<Vec<_>, MetricsError>>()?;
        for (m, d) in dists.iter().enumerate() {
            kl[m].push(kl_to_uniform(d));
        }
        if members.len() >= 2 {
            probe_js(&dists, grid, &mut per);
        }
    }
    let kl: Vec<KlSummary> = kl
        .iter()
        .enumerate()
        .map(|(member, v)| {
            let (mean_kl_bits, stderr) = mean_stderr(v);
            KlSummary { member, mean_kl_bits, stderr }
        })
        .collect();
    let ensemble_mean_kl_bits = kl.iter().map(|k| k.mean_kl_bits).sum::<f64>() / kl.len() as f64;
    let js_curve = if members.len() >= 2 { curve(grid, &per) } else { Vec::new() };
    Ok(ProbeAnalysis { kl, ensemble_mean_kl_bits, js_curve })
}

/// Mean pairwise JS distance over probes at each nucleus mass.
pub fn ensemble_js_curve(members: &[&ModelParams], probes: &[ProbeSample], grid: &[f64]) -> Result<Vec<JsPoint>, MetricsError> {
    if members.len() < 2 {
        return Err(MetricsError::TooFewMembers(members.len()));
    }
    Ok(analyze_probes(members, probes, grid)?.js_curve)
}

#[cfg(test)]
mod tests;
