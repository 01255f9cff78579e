//! Command-line front end: `tokenizer`, `train`, `analyze`, `run`,
//! `neighbors` and `defaults`.

pub mod config;
pub mod pipeline;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{ConfigError, ExperimentConfig, Profile};
pub use pipeline::{PipelineError, RunPaths};
pub use report::DiagnosticsReport;

#[derive(Debug, Parser)]
#[command(name = "mlm-agreement", version, about = "Train matched masked-LM ensembles and compare their predictions and embeddings")]
pub struct Cli {
    /// Experiment config (TOML) layered over the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    pub profile: Profile,
    /// Overrides experiment.output_dir.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides experiment.members.
    #[arg(long, global = true)]
    pub members: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the tokenizer and write tokenizer.json.
    Tokenizer,
    /// Train (or resume) every ensemble member.
    Train,
    /// Compute the diagnostics report from trained members.
    Analyze,
    /// tokenizer, train and analyze in sequence.
    Run,
    /// Nearest neighbors of one token in a member's embedding table.
    Neighbors {
        #[arg(long)]
        token: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        member: usize,
    },
    /// Print the effective configuration as TOML.
    Defaults {
        /// Start from the DNA preset instead of the text one.
        #[arg(long)]
        dna: bool,
    },
}

pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, PipelineError> {
    let mut cfg = match (&cli.config, &cli.command) {
        (Some(p), _) => ExperimentConfig::load(p, cli.profile)?,
        (None, Command::Defaults { dna: true }) => ExperimentConfig::dna_preset(cli.profile),
        (None, _) => ExperimentConfig::profile(cli.profile),
    };
    if let Some(out) = &cli.out {
        cfg.experiment.output_dir = out.clone();
    }
    if let Some(n) = cli.members {
        cfg.experiment.members = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one parsed command, writing user-facing output to `out`.
pub fn execute(cli: &Cli, out: &mut dyn std::io::Write) -> Result<(), PipelineError> {
    let cfg = resolve_config(cli)?;
    let paths = RunPaths::new(&cfg.experiment.output_dir);
    let stdout_err = |source| PipelineError::Io { path: "<stdout>".into(), source };
    match &cli.command {
        Command::Defaults { .. } => write!(out, "{}", cfg.to_toml()).map_err(stdout_err)?,
        Command::Tokenizer => {
            let tok = pipeline::cmd_tokenizer(&cfg, &paths)?;
            writeln!(out, "tokenizer: {} entries, hash {}", tok.vocab_size(), tok.hash()).map_err(stdout_err)?;
        }
        Command::Train => train(&cfg, &paths, out)?,
        Command::Analyze => analyze(&cfg, &paths, out)?,
        Command::Run => {
            pipeline::cmd_tokenizer(&cfg, &paths)?;
            train(&cfg, &paths, out)?;
            analyze(&cfg, &paths, out)?;
        }
        Command::Neighbors { token, k, member } => {
            if *member >= cfg.experiment.members {
                return Err(PipelineError::Validation(format!(
                    "member {member} out of range for an ensemble of {}",
                    cfg.experiment.members
                )));
            }
            let tok = pipeline::load_tokenizer(&paths)?;
            let ckpt = pipeline::read_member(&paths, *member)?;
            for (i, (t, c)) in pipeline::cmd_neighbors(&ckpt, &tok, token, *k)?.iter().enumerate() {
                writeln!(out, "{}\t{t:?}\t{c:.6}", i + 1).map_err(stdout_err)?;
            }
        }
    }
    Ok(())
}

fn train(cfg: &ExperimentConfig, paths: &RunPaths, out: &mut dyn std::io::Write) -> Result<(), PipelineError> {
    let t = pipeline::cmd_train(cfg, paths)?;
    let e = |source| PipelineError::Io { path: "<stdout>".into(), source };
    writeln!(out, "trained {} members, reused {}", t.trained, t.resumed).map_err(e)?;
    for m in &t.members {
        let last = m.meta.epoch_loss.last().copied().unwrap_or(f64::NAN);
        writeln!(out, "member {}: {} steps, {} tokens, final epoch loss {last:.4}", m.meta.member, m.meta.steps, m.meta.tokens_seen)
            .map_err(e)?;
    }
    Ok(())
}

fn analyze(cfg: &ExperimentConfig, paths: &RunPaths, out: &mut dyn std::io::Write) -> Result<(), PipelineError> {
    let rep = pipeline::cmd_analyze(cfg, paths)?;
    let e = |source| PipelineError::Io { path: "<stdout>".into(), source };
    let k = &rep.kl_to_uniform;
    writeln!(out, "KL to uniform: {:.4} bits (log2 V = {:.3})", k.ensemble_mean_bits, k.log2_vocab).map_err(e)?;
    for pt in &rep.js_curve {
        writeln!(out, "JS p={:.2}: {:.4} ± {:.4}", pt.p, pt.mean_js, pt.stderr).map_err(e)?;
    }
    if let Some(s) = rep.fisher_shares() {
        writeln!(out, "Fisher shares: embeddings {:.3}, transformer {:.3}, head {:.3}", s.embeddings, s.transformer, s.head)
            .map_err(e)?;
    }
    writeln!(out, "report: {}", paths.report().display()).map_err(e)?;
    Ok(())
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli, &mut std::io::stdout().lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
