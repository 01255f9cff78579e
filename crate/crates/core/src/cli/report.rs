//! Diagnostics report (JSON) and the per-figure CSV tables.

use std::path::Path;

use serde::Serialize;

use super::config::ExperimentConfig;
use super::pipeline::{io_err, Dataset, PipelineError, RunPaths};
use crate::fisher::{EnsembleFisher, FisherShares};
use crate::metrics::{AgreementTable, JsPoint, KlSummary, ProbeAnalysis};
use crate::model::{Checkpoint, LayerGroup};
use crate::tokenize::{Scheme, TokenizerSpec};
use crate::train::MemberResult;

pub const REPORT_SCHEMA: &str = include_str!("../../schema/report.schema.json");
pub const REPORT_FORMAT: &str = "mlm-agreement/report";
pub const REPORT_VERSION: u32 = 1;

/// Conventions this implementation fixes where the method leaves a choice.
pub const DEVIATIONS: &[&str] = &[
    "pre-norm residual blocks with exact GELU (reference BERT is post-norm)",
    "final layer norm before the output projection is counted in the head group",
    "no weight tying between token embeddings and the output projection",
    "BPE vocabulary size includes the 3 special tokens; k-mer vocabulary is 3 + 4^k",
    "no CLS/SEP tokens",
    "masking selects 15% of tokens, replaced 80% MASK / 10% random / 10% unchanged unless mask_policy says otherwise",
    "masking randomness derives from the data seed so all members see identical batches",
    "linear warmup over the first warmup_fraction of steps, then constant learning rate",
    "weight decay applies to matrices only, not to biases or norm parameters",
    "probes are held-out tail windows with one uniformly chosen position masked",
    "Jensen-Shannon distance uses base-2 logarithms; nucleus truncation is applied per member before mixing",
    "Procrustes analysis standardizes both tables and fits the optimal scale; cosine is the mean row-wise cosine",
    "special tokens are excluded from all embedding statistics",
];

#[derive(Debug, Clone, Serialize)]
pub struct Seeds {
    pub data_seed: u64,
    pub weight_seed_base: u64,
    pub member_weight_seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub experiment: String,
    pub config_hash: String,
    pub train_hash: String,
    pub tokenizer_hash: String,
    pub seeds: Seeds,
    pub deviations: Vec<String>,
    pub package_version: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct TokenizerStats {
    pub scheme: Scheme,
    pub vocab_size: usize,
    pub k: Option<usize>,
    pub merges: usize,
    pub corpus_tokens: usize,
    pub train_windows: [usize; 2],
    pub probe_windows: [usize; 2],
}

#[derive(Debug, Clone, Serialize)]
pub struct MemberTraining {
    pub member: usize,
    pub weight_seed: u64,
    pub steps: u64,
    pub tokens_seen: u64,
    pub epoch_loss: Vec<f64>,
    pub param_count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct KlReport {
    pub members: Vec<KlSummary>,
    pub ensemble_mean_bits: f64,
    pub log2_vocab: f64,
    pub n_probes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    pub format: String,
    pub version: u32,
    pub metadata: Metadata,
    pub config: serde_json::Value,
    pub tokenizer: TokenizerStats,
    pub training: Vec<MemberTraining>,
    pub kl_to_uniform: KlReport,
    pub js_curve: Vec<JsPoint>,
    pub agreement: Option<AgreementTable>,
    pub fisher: EnsembleFisher,
}

impl DiagnosticsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn js_at(&self, p: f64) -> Option<f64> {
        self.js_curve.iter().find(|pt| (pt.p - p).abs() < 1e-12).map(|pt| pt.mean_js)
    }

    pub fn fisher_shares(&self) -> Option<&FisherShares> {
        self.fisher.ensemble.as_ref()
    }
}

pub fn build_report(
    cfg: &ExperimentConfig,
    tok: &TokenizerSpec,
    ds: &Dataset,
    members: &[Checkpoint],
    probes: ProbeAnalysis,
    agreement: Option<AgreementTable>,
    fisher: EnsembleFisher,
) -> DiagnosticsReport {
    let mut config = serde_json::to_value(cfg).expect("config serializes");
    config["experiment"].as_object_mut().expect("section").remove("output_dir");
    let n_probes = probes.js_curve.first().map(|p| p.n_probes).unwrap_or(ds.held_out.len());
    DiagnosticsReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        metadata: Metadata {
            experiment: cfg.experiment.name.clone(),
            config_hash: cfg.config_hash(),
            train_hash: cfg.train_hash(),
            tokenizer_hash: tok.hash(),
            seeds: Seeds {
                data_seed: cfg.experiment.data_seed,
                weight_seed_base: cfg.experiment.weight_seed,
                member_weight_seeds: cfg.weight_seeds(),
            },
            deviations: DEVIATIONS.iter().map(|s| s.to_string()).collect(),
            package_version: env!("CARGO_PKG_VERSION").into(),
        },
        config,
        tokenizer: TokenizerStats {
            scheme: tok.scheme(),
            vocab_size: tok.vocab_size(),
            k: tok.k(),
            merges: tok.merges().len(),
            corpus_tokens: ds.n_tokens,
            train_windows: [ds.train_range.start, ds.train_range.end],
            probe_windows: [ds.probe_range.start, ds.probe_range.end],
        },
        training: members
            .iter()
            .map(|c| MemberTraining {
                member: c.meta.member,
                weight_seed: c.meta.weight_seed,
                steps: c.meta.steps,
                tokens_seen: c.meta.tokens_seen,
                epoch_loss: c.meta.epoch_loss.clone(),
                param_count: c.params.param_count(),
            })
            .collect(),
        kl_to_uniform: KlReport {
            members: probes.kl,
            ensemble_mean_bits: probes.ensemble_mean_kl_bits,
            log2_vocab: (tok.vocab_size() as f64).log2(),
            n_probes,
        },
        js_curve: probes.js_curve,
        agreement,
        fisher,
    }
}

/// CSV text with a leading `# config_hash: ...` line.
fn csv_with_hash(hash: &str, header: &[&str], rows: Vec<Vec<String>>) -> Vec<u8> {
    let mut out = format!("# config_hash: {hash}\n").into_bytes();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    out.extend(w.into_inner().expect("in-memory flush"));
    out
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    crate::fsutil::write_atomic(path, bytes).map_err(io_err(path))
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn write_train_log(path: &Path, hash: &str, results: &[MemberResult]) -> Result<(), PipelineError> {
    let mut rows = Vec::new();
    for r in results {
        let losses = &r.checkpoint.meta.epoch_loss;
        for (e, loss) in losses.iter().enumerate() {
            let secs = if r.resumed { String::new() } else { r.log.get(e).map(|l| num(l.wall_seconds)).unwrap_or_default() };
            rows.push(vec![r.checkpoint.meta.member.to_string(), (e + 1).to_string(), num(*loss), secs]);
        }
    }
    write(path, &csv_with_hash(hash, &["member", "epoch", "mean_loss", "wall_seconds"], rows))
}

fn group_rows(who: &str, s: &Option<FisherShares>) -> Vec<Vec<String>> {
    LayerGroup::ALL
        .iter()
        .map(|&g| vec![who.to_string(), g.name().to_string(), opt(s.as_ref().map(|s| s.group(g)))])
        .collect()
}

fn layer_rows(who: &str, s: &Option<FisherShares>) -> Vec<Vec<String>> {
    s.iter()
        .flat_map(|s| &s.layers)
        .map(|l| vec![who.to_string(), l.layer.to_string(), l.group.name().to_string(), num(l.share)])
        .collect()
}

pub fn write_outputs(paths: &RunPaths, cfg: &ExperimentConfig, rep: &DiagnosticsReport) -> Result<(), PipelineError> {
    let hash = cfg.config_hash();
    write(&paths.report(), rep.to_json().as_bytes())?;

    let rows = rep
        .js_curve
        .iter()
        .map(|p| vec![num(p.p), num(p.mean_js), num(p.stderr), p.n_probes.to_string()])
        .collect();
    write(&paths.root.join("js_curve.csv"), &csv_with_hash(&hash, &["p", "mean_js", "stderr", "n_probes"], rows))?;

    let mut rows = Vec::new();
    if let Some(t) = &rep.agreement {
        let mut emit = |i: String, j: String, pa_j: &[crate::metrics::KValue], pa_s: &[crate::metrics::KValue], cos: f64, disp: f64| {
            for kv in pa_j {
                rows.push(vec![i.clone(), j.clone(), "jaccard".into(), kv.k.to_string(), opt(kv.value)]);
            }
            for kv in pa_s {
                rows.push(vec![i.clone(), j.clone(), "spearman".into(), kv.k.to_string(), opt(kv.value)]);
            }
            rows.push(vec![i.clone(), j.clone(), "procrustes_cosine".into(), String::new(), num(cos)]);
            rows.push(vec![i, j, "procrustes_disparity".into(), String::new(), num(disp)]);
        };
        for p in &t.pairs {
            emit(p.i.to_string(), p.j.to_string(), &p.jaccard, &p.spearman, p.procrustes_cosine, p.procrustes_disparity);
        }
        emit(
            "mean".into(),
            "mean".into(),
            &t.mean_jaccard,
            &t.mean_spearman,
            t.mean_procrustes_cosine,
            t.mean_procrustes_disparity,
        );
    }
    write(&paths.root.join("agreement.csv"), &csv_with_hash(&hash, &["pair_i", "pair_j", "metric", "k", "value"], rows))?;

    let f = &rep.fisher;
    let mut groups = Vec::new();
    let mut layers = Vec::new();
    for (m, s) in f.members.iter().enumerate() {
        groups.extend(group_rows(&m.to_string(), s));
        layers.extend(layer_rows(&m.to_string(), s));
    }
    groups.extend(group_rows("ensemble", &f.ensemble));
    layers.extend(layer_rows("ensemble", &f.ensemble));
    write(&paths.root.join("fisher_groups.csv"), &csv_with_hash(&hash, &["member", "group", "share"], groups))?;
    write(
        &paths.root.join("fisher_layers.csv"),
        &csv_with_hash(&hash, &["member", "layer_index", "group", "share"], layers),
    )?;
    Ok(())
}
