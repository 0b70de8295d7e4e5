use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use faithbench::experiment::{self, ExperimentConfig};

/// Faithfulness evaluation of attention-based explanations.
#[derive(Parser)]
#[command(name = "faithbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured model and seed; writes checkpoints.
    Train(Common),
    /// Evaluate all methods on trained checkpoints.
    Evaluate(Common),
    /// Violation of attention and its gradient-weighted variants.
    Ablate(Common),
    /// Violation ratio against classifier-head depth.
    DepthStudy {
        #[command(flatten)]
        common: Common,
        /// Comma-separated depths (defaults to the config's `depths`).
        #[arg(long, value_delimiter = ',')]
        depths: Vec<usize>,
    },
    /// Per-example rank correlation vs ΔC scatter data.
    Datamap(Common),
    /// Weight and ΔC profiles of violators and non-violators.
    Behavior(Common),
    /// Print the default configuration as TOML.
    DefaultConfig,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed, overriding the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        Ok(cfg.with_overrides(self.out.clone(), self.seed))
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(c) => {
            let cfg = c.load()?;
            let records = experiment::run_train(&cfg)?;
            let low = records.iter().filter(|r| r.below_floor).count();
            println!("trained {} models into {}", records.len(), cfg.output_dir.join("checkpoints").display());
            if low > 0 {
                eprintln!("warning: {low} models stayed below the accuracy floor (see train/run.log)");
            }
        }
        Command::Evaluate(c) => {
            let cfg = c.load()?;
            let results = experiment::run_evaluate(&cfg)?;
            print!("{}", experiment::seed_averaged_table(&results));
        }
        Command::Ablate(c) => {
            let cfg = c.load()?;
            for r in experiment::run_ablation(&cfg)? {
                println!("{}\t{}\t{:.4}", r.dataset, r.label, r.violation);
            }
        }
        Command::DepthStudy { common, depths } => {
            let cfg = common.load()?;
            let depths = if depths.is_empty() { cfg.depths.clone() } else { depths };
            let study = experiment::run_depth_study(&cfg, &depths)?;
            for t in &study.trends {
                let rho = t.spearman.map_or_else(|| "n/a".to_string(), |r| format!("{r:.3}"));
                println!("{}\t{}\tspearman(depth, violation) = {rho}", t.dataset, t.method);
            }
        }
        Command::Datamap(c) => {
            let cfg = c.load()?;
            let points = experiment::emit_datamap(&cfg)?;
            println!("wrote {} points to {}", points.len(), cfg.output_dir.join("datamap/datamap.csv").display());
        }
        Command::Behavior(c) => {
            let cfg = c.load()?;
            let profiles = experiment::emit_behavior_profile(&cfg)?;
            println!("wrote {} profiles to {}", profiles.len(), cfg.output_dir.join("behavior/behavior.csv").display());
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml()),
    }
    Ok(())
}
