use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ldsa::checkpoint;
use ldsa::learner::full_loss_grad_check;
use ldsa::sweep::{summary_table, sweep_k};
use ldsa::train::{evaluate, train};
use ldsa::{Ablation, RunConfig};
use mimalloc::MiMalloc;

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

#[derive(Parser)]
#[command(name = "ldsa", version, about = "Dynamic subtask assignment for cooperative multi-agent value learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// key = value run configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// override a configuration key, e.g. `--set k=2` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// none, NP, NR, NP+NR, NoDecoder, RanSele, DireProb, Mix, SharedBaseline, QmixLarge
    #[arg(long)]
    ablation: Option<Ablation>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => RunConfig::default(),
        };
        for pair in &self.overrides {
            cfg.set_pair(pair)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(ablation) = self.ablation {
            cfg.ablation = ablation;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing metrics, checkpoint and timelines to --out-dir
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/latest")]
        out_dir: PathBuf,
    },
    /// Greedy evaluation of a checkpoint
    Evaluate {
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        /// write the assignment timelines here
        #[arg(long)]
        timeline: Option<PathBuf>,
    },
    /// Train and evaluate once per subtask count
    SweepK {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// comma-separated subtask counts
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        k: Vec<usize>,
        #[arg(long, default_value = "runs/sweep")]
        out_dir: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of the full loss
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 2)]
        episodes: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Write the assignment timelines of a checkpoint's evaluation episodes
    ExportTimeline {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { cfg, out_dir } => {
            let cfg = cfg.resolve()?;
            let outcome = train(&cfg, Some(&out_dir))?;
            let last = outcome.final_record();
            println!(
                "timestep {} return {:.4} normalized {} switches/episode {:.3}",
                last.timestep,
                last.eval_return,
                last.normalized_return.map_or("-".into(), |v| format!("{v:.4}")),
                last.switches_per_episode
            );
            println!("wrote {}", out_dir.display());
        }
        Command::Evaluate {
            checkpoint: dir,
            episodes,
            timeline,
        } => {
            let (cfg, model) = checkpoint::load(&dir)?;
            let s = evaluate(&model, &cfg, episodes.unwrap_or(cfg.eval_episodes))?;
            println!(
                "return {:.4} discounted {:.4} oracle {} normalized {} switches/episode {:.3} usage {:?}",
                s.mean_return,
                s.mean_discounted,
                s.oracle.map_or("-".into(), |v| format!("{v:.4}")),
                s.normalized.map_or("-".into(), |v| format!("{v:.4}")),
                s.switches_per_episode,
                s.usage
            );
            if let Some(path) = timeline {
                fs::write(&path, s.timeline_csv(model.arch.k()))?;
            }
        }
        Command::SweepK { cfg, k, out_dir } => {
            let cfg = cfg.resolve()?;
            let rows = sweep_k(&cfg, &k, Some(&out_dir))?;
            let table = summary_table(&rows);
            fs::create_dir_all(&out_dir)?;
            fs::write(out_dir.join("summary.tsv"), &table)?;
            print!("{table}");
        }
        Command::GradCheck {
            cfg,
            episodes,
            step,
            tolerance,
        } => {
            let cfg = cfg.resolve()?;
            let report = full_loss_grad_check(&cfg, episodes, step)?;
            println!(
                "max relative error {:.3e} over {} coordinates (worst block {}, index {})",
                report.max_rel_error, report.coordinates, report.worst.0, report.worst.1
            );
            if report.max_rel_error >= tolerance {
                bail!("gradient check failed: {:.3e} >= {tolerance:e}", report.max_rel_error);
            }
        }
        Command::ExportTimeline {
            checkpoint: dir,
            episodes,
            out,
        } => {
            let (cfg, model) = checkpoint::load(&dir)?;
            let s = evaluate(&model, &cfg, episodes)?;
            fs::write(&out, s.timeline_csv(model.arch.k()))?;
            println!("wrote {} rows to {}", s.rollouts.iter().map(|r| r.selections.entries.len()).sum::<usize>(), out.display());
        }
    }
    Ok(())
}
