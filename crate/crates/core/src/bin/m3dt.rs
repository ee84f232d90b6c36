use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use m3dt::commands::{self, RunDir};
use m3dt::eval::EvalMode;
use m3dt::pipeline::{ExperimentConfig, GroupingChoice, Variant};

#[derive(Parser)]
#[command(name = "m3dt", version, about = "Staged mixture-of-experts Prompt-DT training on synthetic control tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON). Defaults to `<out>/config.json` when
    /// present, otherwise to the chosen preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration used when no config file is found.
    #[arg(long, default_value = "desk", value_parser = ["desk", "full", "smoke"])]
    preset: String,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory. Overrides `output_dir` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate offline datasets, manifest.json and config.json.
    GenData(Common),
    /// Stage 1: train the shared backbone with conflict tracking.
    TrainBackbone(Common),
    /// Partition tasks into groups, one per expert.
    GroupTasks {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: GroupingChoice,
    },
    /// Stage 2: train one expert per task group.
    TrainExperts(Common),
    /// Stage 3: train the router with backbone and experts frozen.
    TrainRouter(Common),
    /// Closed-loop evaluation: dense, topk:<k>, oracle or backbone.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: EvalMode,
    },
    /// Run an ablation variant under ablations/<variant>/.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// e2e, no_grouping, no_expert_freeze, oracle_eval, topk:<k> or small.
        #[arg(long)]
        variant: Variant,
    },
    /// Collect results into report.json and print it.
    Report(Common),
    /// Every stage in order, then the report.
    Run(Common),
    /// Print the resolved configuration.
    ShowConfig(Common),
}

fn resolve(common: &Common) -> Result<(ExperimentConfig, RunDir)> {
    let from_file = |path: &PathBuf| -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        ExperimentConfig::from_json(&text).with_context(|| format!("in {}", path.display()))
    };
    let mut cfg = match (&common.config, &common.out) {
        (Some(path), _) => from_file(path)?,
        (None, Some(out)) if out.join("config.json").exists() => from_file(&out.join("config.json"))?,
        _ => ExperimentConfig::preset(&common.preset)?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    cfg.validate()?;
    let Some(out) = cfg.output_dir.clone() else {
        bail!("no run directory: pass --out or set output_dir in the configuration");
    };
    Ok((cfg, RunDir::new(out)))
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData(c) => {
            let (cfg, run) = resolve(&c)?;
            let m = commands::gen_data(&cfg, &run)?;
            eprintln!("wrote {} datasets to {}", m.files.len(), run.root.display());
        }
        Command::TrainBackbone(c) => {
            let (cfg, run) = resolve(&c)?;
            let s = commands::train_backbone(&cfg, &run)?;
            eprintln!(
                "stage 1: selected step {} of {} (early stop {})",
                s.selected_step,
                s.final_step,
                if s.early_stop_fired { "fired" } else { "not fired" }
            );
        }
        Command::GroupTasks { common, method } => {
            let (cfg, run) = resolve(&common)?;
            let g = commands::group_tasks(&cfg, &run, method)?;
            print(&g.members)?;
        }
        Command::TrainExperts(c) => {
            let (cfg, run) = resolve(&c)?;
            let sim = commands::train_experts(&cfg, &run)?;
            eprintln!("stage 2: mean expert gradient similarity {sim:?}");
        }
        Command::TrainRouter(c) => {
            let (cfg, run) = resolve(&c)?;
            let check = commands::train_router(&cfg, &run)?;
            if !check.holds() {
                bail!("frozen parameters changed during router training: {check:?}");
            }
            eprintln!("stage 3: done, frozen components intact");
        }
        Command::Evaluate { common, mode } => {
            let (cfg, run) = resolve(&common)?;
            let e = commands::evaluate(&cfg, &run, mode)?;
            println!("{mode}: mean normalized score {:.3}", e.mean_score);
        }
        Command::Ablate { common, variant } => {
            let (cfg, run) = resolve(&common)?;
            print(&commands::ablate(&cfg, &run, variant)?)?;
        }
        Command::Report(c) => {
            let (cfg, run) = resolve(&c)?;
            print(&commands::report(&cfg, &run)?)?;
        }
        Command::Run(c) => {
            let (cfg, run) = resolve(&c)?;
            let r = commands::run_pipeline(&cfg, &run)?;
            for (mode, e) in &r.evaluations {
                println!("{mode}: {:.3}", e.mean_score);
            }
            if let Some(gap) = r.oracle_gap {
                println!("oracle gap: {gap:.3}");
            }
        }
        Command::ShowConfig(c) => {
            let (cfg, _) = resolve(&c).or_else(|_| -> Result<_> {
                let mut cfg = match &c.config {
                    Some(p) => ExperimentConfig::from_json(&fs::read_to_string(p)?)?,
                    None => ExperimentConfig::preset(&c.preset)?,
                };
                if let Some(seed) = c.seed {
                    cfg.seed = seed;
                }
                Ok((cfg, RunDir::new(".")))
            })?;
            print(&cfg)?;
        }
    }
    Ok(())
}
