//! padprobe: probe frozen convolutional encoders for absolute position.
//!
//! Usage:
//!   padprobe pretrain   --config <file.json> --out <dir> [--seed N]
//!   padprobe probe      --config <file.json> --out <dir> [--seed N]
//!   padprobe patterns   --out <dir> [--config <file.json>] [--side N]
//!   padprobe experiment <kind> --config <file.json> --out <dir> [--seed N]

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use padprobe::data::ImageSource;
use padprobe::experiments::{write_patterns, ExperimentConfig, ExperimentKind, Lab, RowStatus, RunSummary};

#[derive(Parser)]
#[command(
    name = "padprobe",
    version,
    about = "Position-information probing for convolutional encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain every configured encoder and save its weights.
    Pretrain(Common),
    /// Train one probe per pattern on the first encoder and save the probes.
    Probe(Common),
    /// Write the ground-truth position maps as PGM images.
    Patterns {
        #[command(flatten)]
        common: Common,
        /// Map side; defaults to the config's image side.
        #[arg(long)]
        side: Option<usize>,
    },
    /// Run one experiment suite.
    Experiment {
        /// existence, layers, kernels, per-layer, padding, heatmap or pretrain.
        kind: ExperimentKind,
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::from_path(path).with_context(|| format!("reading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        let out = match (&self.out, &config.out) {
            (Some(o), _) | (None, Some(o)) => o.clone(),
            (None, None) => bail!("no output directory: pass --out or set `out` in the config"),
        };
        config.out = Some(out.clone());
        Ok((config, out))
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain(common) => run(&common, ExperimentKind::Pretrain),
        Command::Experiment { kind, common } => run(&common, kind),
        Command::Probe(common) => {
            let (config, out) = common.resolve()?;
            let mut lab = Lab::new(config)?;
            let (summary, _) = lab.run_probe(&out)?;
            print_summary(&summary, &out);
            Ok(())
        }
        Command::Patterns { common, side } => {
            let (config, out) = common.resolve()?;
            let side = side.unwrap_or(config.side);
            for path in write_patterns(&config.patterns, side, &out)? {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

fn run(common: &Common, kind: ExperimentKind) -> Result<()> {
    let (config, out) = common.resolve()?;
    info!("running {kind} into {}", out.display());
    let summary = Lab::new(config)?.run(kind, &out)?;
    print_summary(&summary, &out);
    Ok(())
}

fn print_summary(summary: &RunSummary, out: &Path) {
    for p in &summary.pretrain {
        let acc = p
            .train_accuracy
            .map(|a| format!("{a:.3}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:<24} {:<12} params {:>9}  train acc {acc}",
            p.model, p.origin, p.param_count
        );
    }
    for r in summary.rows.iter().filter(|r| r.source == ImageSource::Natural) {
        match (r.status, r.spc_mean, r.mae_mean) {
            (RowStatus::Ok, Some(s), Some(m)) => {
                println!(
                    "{:<24} {:<14} {:<3} SPC {s:>7.3}  MAE {m:.3}",
                    r.model,
                    r.variant,
                    r.pattern.name()
                )
            }
            _ => println!(
                "{:<24} {:<14} {:<3} skipped: {}",
                r.model,
                r.variant,
                r.pattern.name(),
                r.reason
            ),
        }
    }
    println!("outputs written to {}", out.display());
}
