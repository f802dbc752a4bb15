//! Command-line surface: five subcommands over one config file.
//!
//! Exit codes: 0 success, 1 user/configuration error, 2 numeric abort
//! (non-finite loss with a diagnostic dump).

use crate::commands;
use crate::config::RunConfig;
use crate::error::Error;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "speech2image", version, about = "Speech-conditioned image GAN: corpus, training, generation, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Args)]
pub struct CommonArgs {
    /// Run configuration file
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Checkpoint to resume from (train) or to load (generate/evaluate)
    #[arg(long, value_name = "PATH")]
    pub resume: Option<PathBuf>,
    /// Override the config seed
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Override this command's output directory
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Synthesize the paired image/speech-feature corpus
    SynthData(CommonArgs),
    /// Pretrain the speech encoder, image head and classifier
    Pretrain(CommonArgs),
    /// Run (or resume) adversarial training
    Train(CommonArgs),
    /// Generate sample PNGs and a contact sheet from a checkpoint
    Generate(CommonArgs),
    /// Compute the evaluation metrics for a checkpoint
    Evaluate(CommonArgs),
}

fn load_config(args: &CommonArgs) -> crate::error::Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> i32 {
    let result = match cli.cmd {
        Cmd::SynthData(args) => load_config(&args).and_then(|mut cfg| {
            if let Some(out) = &args.out {
                cfg.paths.corpus_dir = out.clone();
            }
            let manifest = commands::cmd_synth_data(&cfg)?;
            println!("corpus written: {}", manifest.display());
            Ok(())
        }),
        Cmd::Pretrain(args) => load_config(&args).and_then(|mut cfg| {
            if let Some(out) = &args.out {
                cfg.paths.checkpoint_dir = out.clone();
            }
            let (path, gap, degenerate) = commands::cmd_pretrain(&cfg)?;
            if degenerate {
                eprintln!(
                    "warning: single-class corpus; the matching loss is defined but the \
                     held-out gap is not meaningful"
                );
            }
            println!("encoders written: {} (held-out cosine gap {gap:.4})", path.display());
            Ok(())
        }),
        Cmd::Train(args) => load_config(&args).and_then(|mut cfg| {
            if let Some(out) = &args.out {
                cfg.paths.checkpoint_dir = out.clone();
            }
            let res = commands::cmd_train(&cfg, args.resume.as_deref());
            match res {
                Ok((path, records)) => {
                    println!(
                        "training complete: {} steps, final checkpoint {}",
                        records.len(),
                        path.display()
                    );
                    Ok(())
                }
                Err(Error::Numeric(msg)) => {
                    let dump = cfg.paths.checkpoint_dir.join("abort_diagnostics.txt");
                    let _ = std::fs::create_dir_all(&cfg.paths.checkpoint_dir);
                    let _ = std::fs::write(&dump, &msg);
                    eprintln!("numeric abort; diagnostics at {}", dump.display());
                    Err(Error::Numeric(msg))
                }
                Err(e) => Err(e),
            }
        }),
        Cmd::Generate(args) => load_config(&args).and_then(|cfg| {
            let ckpt = args
                .resume
                .clone()
                .unwrap_or_else(|| cfg.paths.checkpoint_dir.join(commands::TRAIN_CKPT));
            let out = args
                .out
                .clone()
                .unwrap_or_else(|| cfg.paths.report_dir.join("samples"));
            let written = commands::cmd_generate(&cfg, &ckpt, &out)?;
            println!("wrote {} files under {}", written.len(), out.display());
            Ok(())
        }),
        Cmd::Evaluate(args) => load_config(&args).and_then(|cfg| {
            let ckpt = args
                .resume
                .clone()
                .unwrap_or_else(|| cfg.paths.checkpoint_dir.join(commands::TRAIN_CKPT));
            let out = args.out.clone().unwrap_or_else(|| cfg.paths.report_dir.clone());
            let report = commands::cmd_evaluate(&cfg, &ckpt, &out)?;
            if report.recall.is_some() && report.recall_k != cfg.eval.recall_k {
                eprintln!(
                    "warning: recall k clamped from {} to the gallery size {}",
                    cfg.eval.recall_k, report.recall_k
                );
            }
            print!("{}", report.render());
            println!("report written: {}", out.join("evaluation.txt").display());
            Ok(())
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
