use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ovt_cli::{
    cmd_compare, cmd_eval, cmd_gen, cmd_gradcheck, cmd_train, parse_seeds, resolve_config, threads_from_env,
    CHECKPOINT_FILE, COMPARE_FILE,
};
use ovt_core::config::ExperimentConfig;

const TRAIN_HELP: &str = "Writes <out>/metrics.csv, <out>/model.ckpt and <out>/config.json.

metrics.csv columns:
  epoch                       0 is the state before training
  itc_loss                    mean contrastive loss over the epoch's batches
  vc_loss                     mean viewpoint-consistency loss
  total_loss                  itc_loss + lambda * vc_loss
  mean_intra_object_distance  mean over objects of the largest pairwise cosine distance between views
  outlier_mean_distance       mean distance of selected outliers to their anchors
  zero_shot_top1              top-1 accuracy on the held-out clean set
  seconds                     wall time of the epoch (0 unless train.record_wall_time)";

const COMPARE_HELP: &str = "Writes <out>/compare.csv with columns
seed,mode,initial_invariance,final_invariance,initial_zero_shot_top1,final_zero_shot_top1,final_itc_loss,final_vc_loss
followed by one `median` row per mode.";

#[derive(Parser)]
#[command(
    name = "ovt",
    version,
    about = "Omniview tuning experiments on synthetic multi-view data"
)]
struct Cli {
    /// JSON experiment config; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialization and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override a config field, e.g. --set train.lambda=0.5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate multi-view, clean and held-out JSONL splits.
    Gen,
    /// Train adapters and the fusion block.
    #[command(after_long_help = TRAIN_HELP)]
    Train {
        /// Directory holding the JSONL splits (default: --out).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and print a JSON report.
    Eval {
        /// Checkpoint file (default: <out>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory holding the JSONL splits (default: --out).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference checks of every loss gradient.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Train every sampling mode on several seeds with the same budget.
    #[command(after_long_help = COMPARE_HELP)]
    Compare {
        /// Comma list or range, e.g. 0,1,2 or 0..5.
        #[arg(long, default_value = "0..5")]
        seeds: String,
    },
}

fn run(cli: Cli) -> ovt_core::Result<ExitCode> {
    let cfg: ExperimentConfig = resolve_config(cli.config.as_deref(), &cli.overrides, cli.seed, cli.out.as_deref())?;
    let threads = threads_from_env()?;
    let out = cfg.out_dir.clone();
    match cli.command {
        Command::Gen => {
            let s = cmd_gen(&cfg, &out)?;
            println!(
                "multiview: {} records ({} objects, {} hard views)",
                s.multiview, s.objects, s.hard_views
            );
            println!("clean: {} records", s.clean);
            println!("holdout: {} records", s.holdout);
            println!("written to {}", out.display());
        }
        Command::Train { data } => {
            let data = data.unwrap_or_else(|| out.clone());
            let s = cmd_train(&cfg, &data, &out, threads)?;
            println!("total params: {}", s.total_params);
            println!("trainable params: {}", s.trainable_params);
            println!(
                "invariance: {:.4} -> {:.4}",
                s.initial.mean_intra_object_distance, s.last.mean_intra_object_distance
            );
            println!(
                "zero-shot top-1: {:.4} -> {:.4}",
                s.initial.zero_shot_top1, s.last.zero_shot_top1
            );
            println!("metrics: {}", s.metrics.display());
            println!("checkpoint: {}", s.checkpoint.display());
        }
        Command::Eval { checkpoint, data } => {
            let ckpt = checkpoint.unwrap_or_else(|| out.join(CHECKPOINT_FILE));
            let data = data.unwrap_or_else(|| out.clone());
            let report = cmd_eval(&cfg, &ckpt, &data)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Gradcheck { corrupt } => {
            let s = cmd_gradcheck(&cfg, corrupt)?;
            print!("{}", s.table());
            println!(
                "{} configurations, max relative error {:.3e}, tolerance {:.0e}: {}",
                s.configurations,
                s.max_relative_error(),
                s.tolerance,
                if s.passed() { "PASS" } else { "FAIL" }
            );
            if !s.passed() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Compare { seeds } => {
            let seeds = parse_seeds(&seeds)?;
            let r = cmd_compare(&cfg, &seeds, &out, threads)?;
            for m in &r.medians {
                println!(
                    "median {:>4}: final invariance {:.4}, zero-shot top-1 {:.4}",
                    m.mode.name(),
                    m.final_invariance,
                    m.final_zero_shot_top1
                );
            }
            println!("rows: {}", out.join(COMPARE_FILE).display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
