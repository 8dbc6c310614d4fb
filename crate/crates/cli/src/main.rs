//! detbench: drives the experiment pipelines from JSON configs.
//!
//! Every subcommand exits 0 on success; failures print a one-line JSON error
//! object to stderr and exit nonzero, so wrappers can parse outcomes.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use detbench_core::corpus::{generate_corpus, save_corpus};
use detbench_core::detector::save_detector;
use detbench_core::error::{Error, Result};
use detbench_core::fsutil::ensure_writable_dir;
use detbench_core::harness::{
    emit_report, load_config, prepare, run_benign, run_defense_eval, run_degradation_sweep,
    run_transfer_matrix, run_whitebox, write_spectra, write_transfer_matrices, CorpusSource,
    ExperimentConfig,
};

#[derive(Parser)]
#[command(
    name = "detbench",
    version,
    about = "Adversarial-robustness benchmark for AI-generated-image detectors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config JSON; shipped defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus as labeled PNGs plus a manifest.
    GenCorpus(Common),
    /// Train every configured detector and save checkpoints.
    Train(Common),
    /// Clean baseline metrics per detector.
    Benign(Common),
    /// White-box attack sweeps, with mean-perturbation spectra.
    Whitebox(Common),
    /// Black-box transfer matrices.
    Transfer(Common),
    /// Degradation interaction sweep (benign/white-box/black-box regimes).
    DegradeSweep(Common),
    /// Robust fine-tuning defense evaluation.
    Defense(Common),
}

fn effective_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.global_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn announce(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(command: &Command) -> Result<()> {
    match command {
        Command::GenCorpus(c) => {
            let cfg = effective_config(c)?;
            let CorpusSource::Synthetic(spec) = &cfg.corpus else {
                return Err(Error::InvalidArgument(
                    "gen-corpus needs a synthetic corpus in the config".into(),
                ));
            };
            let images = generate_corpus(spec)?;
            let dir = cfg.output_dir.join("corpus");
            save_corpus(&dir, &images)?;
            println!("wrote {} images under {}", images.len(), dir.display());
        }
        Command::Train(c) => {
            let cfg = effective_config(c)?;
            let prep = prepare(&cfg)?;
            let dir = cfg.output_dir.join("checkpoints");
            ensure_writable_dir(&dir)?;
            let mut paths = Vec::new();
            for det in &prep.detectors {
                let path = dir.join(format!("{}.dbck", det.name()));
                save_detector(det, &path)?;
                paths.push(path);
            }
            announce(&paths);
        }
        Command::Benign(c) => {
            let cfg = effective_config(c)?;
            let report = run_benign(&cfg)?;
            announce(&emit_report(&report, &cfg.output_dir, "benign")?);
        }
        Command::Whitebox(c) => {
            let cfg = effective_config(c)?;
            let (report, spectra) = run_whitebox(&cfg)?;
            announce(&emit_report(&report, &cfg.output_dir, "whitebox")?);
            announce(&write_spectra(&spectra, &cfg.output_dir)?);
        }
        Command::Transfer(c) => {
            let cfg = effective_config(c)?;
            let (report, matrices) = run_transfer_matrix(&cfg)?;
            announce(&emit_report(&report, &cfg.output_dir, "transfer")?);
            announce(&write_transfer_matrices(&matrices, &cfg.output_dir)?);
        }
        Command::DegradeSweep(c) => {
            let cfg = effective_config(c)?;
            let report = run_degradation_sweep(&cfg)?;
            announce(&emit_report(&report, &cfg.output_dir, "degrade_sweep")?);
        }
        Command::Defense(c) => {
            let cfg = effective_config(c)?;
            let report = run_defense_eval(&cfg)?;
            announce(&emit_report(&report, &cfg.output_dir, "defense")?);
        }
    }
    Ok(())
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::ShapeMismatch { .. } => "shape_mismatch",
        Error::MissingFeed(_) => "missing_feed",
        Error::BadNodeId(_) => "bad_node_id",
        Error::NotScalar(_) => "not_scalar",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::SingleClass(_) => "single_class",
        Error::Empty(_) => "empty",
        Error::NonFinite(_) => "non_finite",
        Error::Checkpoint(_) => "checkpoint",
        Error::Corpus(_) => "corpus",
        Error::Image(_) => "image",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Csv(_) => "csv",
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    let payload = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{payload}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string()),
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(error_kind(&e), e.to_string()),
    }
}
