use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use deal_cli::commands;
use deal_cli::RunConfig;

#[derive(Parser)]
#[command(name = "deal", version, about = "Dual-encoder link prediction on attributed graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file; unspecified keys keep their defaults
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set gamma1=2` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a train/validation/test split
    Split(Common),
    /// Train on a split and write a checkpoint
    Train(Common),
    /// Evaluate a checkpoint, or run the multi-trial protocol when trials > 1
    Eval(Common),
    /// Grid search over sweep.* keys ranked by validation AUC
    Sweep(Common),
    /// Per-hop embedding similarity of a checkpoint
    Diagnose(Common),
    /// Score pairs `P:Q`; an endpoint is a node id or `@file` of attributes
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        pairs: Vec<String>,
    },
    /// Print the default configuration
    Defaults,
}

fn build_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(t) = c.trials {
        cfg.set("trials", &t.to_string())?;
    }
    if let Some(o) = &c.out {
        cfg.set("out", &o.display().to_string())?;
    }
    for pair in &c.overrides {
        cfg.set_pair(pair)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Split(c) => {
            let cfg = build_config(&c)?;
            let s = commands::cmd_split(&cfg)?;
            println!(
                "{} split: {} train edges, {} val pos, {} test pos -> {}",
                s.mode,
                s.train_edges.len(),
                s.val_pos.len(),
                s.test_pos.len(),
                cfg.split_path().display()
            );
        }
        Command::Train(c) => {
            let cfg = build_config(&c)?;
            let m = commands::cmd_train(&cfg)?;
            match m.best_val {
                Some((auc, ap)) => println!("best epoch {}: val auc {auc:.4} ap {ap:.4}", m.best_epoch),
                None => println!("trained {} epochs (no validation pairs)", m.best_epoch),
            }
            println!("checkpoint -> {}", cfg.checkpoint_path().display());
        }
        Command::Eval(c) => {
            let cfg = build_config(&c)?;
            let m = commands::cmd_eval(&cfg)?;
            println!(
                "auc {:.4} (sd {:.4})  ap {:.4} (sd {:.4})  over {} trial(s)",
                m.auc,
                m.auc_stddev,
                m.ap,
                m.ap_stddev,
                m.trial_values.len()
            );
        }
        Command::Sweep(c) => {
            let cfg = build_config(&c)?;
            let r = commands::cmd_sweep(&cfg)?;
            println!("{}  val_auc  test_auc  test_ap", r.keys.join("  "));
            for p in &r.points {
                println!("{}  {:.4}  {:.4}  {:.4}", p.values.join("  "), p.val_auc, p.test_auc, p.test_ap);
            }
            println!("best: {}", r.points[r.best].values.join("  "));
        }
        Command::Diagnose(c) => {
            let cfg = build_config(&c)?;
            for (kind, profile) in commands::cmd_diagnose(&cfg)? {
                println!("{kind:?}");
                for h in profile {
                    println!("  hop {}: {:.4} ({} pairs)", h.hop, h.mean_cosine, h.pair_count);
                }
            }
        }
        Command::Predict { common, pairs } => {
            let cfg = build_config(&common)?;
            for (p, q, s) in commands::cmd_predict(&cfg, &pairs)? {
                println!("{p}\t{q}\t{s}");
            }
        }
        Command::Defaults => print!("{}", RunConfig::default().echo()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
