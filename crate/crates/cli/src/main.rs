use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use poselift::runner::{self, RunConfig};
use poselift::training::Stage;

/// Two-stage 2D-to-3D pose lifting: synthesize data, train, evaluate, ablate.
#[derive(Parser, Debug)]
#[command(name = "poselift", version)]
struct Cli {
    /// JSON run config; absent fields keep the desk preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides the config's `out_dir`.
    #[arg(long, global = true, env = "POSELIFT_OUT")]
    out: Option<PathBuf>,

    /// Seed for initialization, shuffling and data synthesis.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic `<name>.train.jsonl` / `<name>.test.jsonl`.
    Synth {
        #[arg(long, default_value = "synth")]
        name: String,
        /// Training samples.
        #[arg(long)]
        count: Option<usize>,
        /// Test samples.
        #[arg(long)]
        test_count: Option<usize>,
    },
    /// Train stage 1 then stage 2, or a single stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: Option<u8>,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// JSONL training set.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Report MPJPE, PCK and AUC of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL evaluation set.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Score the first-stage pose instead of the refined one.
        #[arg(long)]
        first_stage_only: bool,
    },
    /// Run the 10-cell ablation grid and write `ablation.csv`.
    Ablate,
    /// Print parameter counts per submodule.
    Inspect,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::desk(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.synth.seed = seed;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = resolve(&cli)?;
    match cli.command {
        Command::Synth {
            name,
            count,
            test_count,
        } => {
            if let Some(n) = count {
                cfg.synth.count = n;
            }
            if let Some(n) = test_count {
                cfg.synth.test_count = n;
            }
            let (train, test) = runner::cmd_synth(&cfg, &name)?;
            println!("{}\n{}", train.display(), test.display());
        }
        Command::Train { stage, resume, data } => {
            if data.is_some() {
                cfg.train_data = data;
            }
            let stage = stage.map(Stage::from_number).transpose()?;
            let summary = runner::cmd_train(&cfg, stage, resume.as_deref())?;
            if let Some(last) = summary.records.last() {
                println!(
                    "stage {} epoch {} step {}: loss {:.6} mpjpe {:.2} mm",
                    last.stage, last.epoch, last.step, last.loss, last.mpjpe
                );
            }
            println!("log: {}", summary.log.display());
            println!("checkpoint: {}", summary.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            data,
            first_stage_only,
        } => {
            let report = runner::cmd_eval(&cfg, &checkpoint, data.as_deref(), first_stage_only)?;
            println!("MPJPE {:.2} mm", report.mpjpe_mm);
            println!("PCK   {:.2} %", report.pck);
            println!("AUC   {:.4}", report.auc);
            for (g, e) in report.per_group_mm.iter().enumerate() {
                println!("group {g}: {e:.2} mm");
            }
        }
        Command::Ablate => {
            let rows = runner::cmd_ablate(&cfg)?;
            println!(
                "{:<22} {:<28} {:>10} {:>9} {:>11}",
                "table", "variant", "MPJPE", "params", "params@L"
            );
            for r in rows {
                println!(
                    "{:<22} {:<28} {:>10.2} {:>9} {:>11}",
                    r.table, r.variant, r.mpjpe_mm, r.params, r.params_full
                );
            }
        }
        Command::Inspect => {
            let report = runner::cmd_inspect(&cfg)?;
            for (name, n) in &report.submodules {
                println!("{name:<24} {n:>10}");
            }
            println!("{:<24} {:>10}", "total", report.total);
        }
    }
    Ok(())
}
