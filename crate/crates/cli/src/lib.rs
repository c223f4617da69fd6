//! `dlt`: staged runner for targeted transfer attacks between classifiers
//! trained on disjoint label spaces.

pub mod config;
pub mod experiment;
pub mod stage;

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use dlt_core::attacks::AttackFamily;
use dlt_core::eval::Layout;

pub use config::ExperimentConfig;
pub use experiment::{Experiment, WarmStart};

#[derive(Debug, Parser)]
#[command(name = "dlt", version, about = "Targeted transfer attacks across disjoint label spaces")]
pub struct Cli {
    /// Experiment config (JSON). Defaults to the built-in desk-scale setup.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config artifact root.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct AttackArgs {
    #[arg(long, default_value = "fda")]
    pub family: AttackFamily,
    /// Class name, `a+b` union, or `<prefix>-any`.
    #[arg(long)]
    pub target: String,
    /// Whitebox proxy class; the top correspondence proxy when omitted.
    #[arg(long)]
    pub proxy: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Materialize the two disjoint label spaces and the base images.
    BuildSplits,
    /// Train the whitebox (split A) and blackbox (split B) classifiers.
    Train,
    /// Train per-class, per-layer feature probes for every whitebox.
    TrainAux,
    /// Estimate label correspondence with label-only blackbox queries.
    Correspondence,
    /// Rank whitebox proxy classes for a target.
    Proxy {
        #[arg(long)]
        target: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Greedy FDA layer selection per whitebox.
    TuneLayers,
    /// Craft a transfer batch against a target.
    Attack(AttackArgs),
    /// Refine a transfer batch with score queries against one blackbox.
    QueryAttack {
        #[arg(long)]
        target: String,
        #[arg(long)]
        proxy: Option<String>,
        /// `fda`, `tmim` or `none`.
        #[arg(long, default_value = "fda")]
        warm_start: WarmStart,
        #[arg(long)]
        blackbox: Option<String>,
        /// Per-example query budget.
        #[arg(long)]
        budget: Option<usize>,
        /// Comma-separated query counts for the success curve.
        #[arg(long, value_delimiter = ',')]
        checkpoints: Option<Vec<usize>>,
    },
    /// Score a transfer batch against every blackbox.
    Evaluate(AttackArgs),
    /// Render every completed evaluation as one table.
    Report {
        #[arg(long, default_value = "averaged")]
        layout: Layout,
    },
    /// Run a list of stages over the strongest correspondence pairs.
    Pipeline {
        #[arg(long, value_delimiter = ',', default_values_t = PIPELINE_STAGES.map(String::from))]
        stages: Vec<String>,
    },
}

pub const PIPELINE_STAGES: [&str; 9] = [
    "build-splits",
    "train",
    "train-aux",
    "correspondence",
    "tune-layers",
    "attack",
    "evaluate",
    "query-attack",
    "report",
];

pub fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk_default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.root = o.clone();
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    if let Command::QueryAttack { budget, checkpoints, .. } = &cli.command {
        if let Some(b) = budget {
            cfg.query.rgf.max_queries = *b;
        }
        if let Some(c) = checkpoints {
            cfg.query.checkpoints = c.clone();
        }
        cfg.validate()?;
    }
    let exp = Experiment::new(cfg);
    match cli.command {
        Command::BuildSplits => drop(exp.run_splits()?),
        Command::Train => drop(exp.run_train()?),
        Command::TrainAux => drop(exp.run_aux()?),
        Command::Correspondence => drop(exp.run_correspondence()?),
        Command::Proxy { target, k } => {
            let r = exp.rank_proxies(&target, k)?;
            println!("proxies for {}:", r.target);
            for (_, name, score) in &r.ranked {
                println!("  {name:<16} {score:.3}");
            }
        }
        Command::TuneLayers => drop(exp.run_tune()?),
        Command::Attack(a) => drop(exp.run_attack(a.family, &a.target, a.proxy.as_deref())?),
        Command::Evaluate(a) => drop(exp.run_evaluate(a.family, &a.target, a.proxy.as_deref())?),
        Command::QueryAttack { target, proxy, warm_start, blackbox, .. } => {
            drop(exp.run_query(warm_start, &target, proxy.as_deref(), blackbox.as_deref())?)
        }
        Command::Report { layout } => drop(exp.run_report(layout)?),
        Command::Pipeline { stages } => run_pipeline(&exp, &stages)?,
    }
    Ok(())
}

/// Stages run in canonical order whatever order they are listed in.
pub fn run_pipeline(exp: &Experiment, stages: &[String]) -> Result<()> {
    if let Some(s) = stages.iter().find(|s| !PIPELINE_STAGES.contains(&s.as_str())) {
        bail!("unknown stage `{s}` (known: {})", PIPELINE_STAGES.join(", "));
    }
    let want = |s: &str| stages.iter().any(|x| x == s);
    if want("build-splits") {
        exp.run_splits()?;
    }
    if want("train") {
        exp.run_train()?;
    }
    if want("train-aux") {
        exp.run_aux()?;
    }
    if want("correspondence") {
        exp.run_correspondence()?;
    }
    if want("tune-layers") {
        exp.run_tune()?;
    }
    let needs_pairs = ["attack", "evaluate", "query-attack"].iter().any(|s| want(s));
    if needs_pairs {
        // classifiers first: they are the root prerequisite of every attack
        exp.train_stage()?.require()?;
    }
    let pairs = if needs_pairs { exp.pairs()? } else { Vec::new() };
    for p in &pairs {
        for family in [AttackFamily::Tmim, AttackFamily::Fda] {
            if want("attack") {
                exp.run_attack(family, &p.target, Some(&p.proxy))?;
            }
            if want("evaluate") {
                exp.run_evaluate(family, &p.target, Some(&p.proxy))?;
            }
        }
    }
    if want("query-attack") {
        if let Some(p) = pairs.first() {
            for warm in [WarmStart::Family(AttackFamily::Fda), WarmStart::None] {
                exp.run_query(warm, &p.target, Some(&p.proxy), None)?;
            }
        }
    }
    // evaluation always ends in a fresh report
    if want("report") || want("evaluate") {
        exp.run_report(Layout::Averaged)?;
    }
    Ok(())
}
