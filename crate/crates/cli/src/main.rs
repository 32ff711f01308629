use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod manifest;
mod plot;

use config::RunConfig;

/// Synthesize the collaborative QA task, train panelists and a moderator,
/// and evaluate them.
#[derive(Parser)]
#[command(name = "collabqa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` configuration file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed of this command's random stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory: inputs are read from and outputs written to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for evaluation.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the three knowledge graphs.
    GenKg(Common),
    /// Build the template catalog and the train/dev/test questions.
    GenData(Common),
    /// Pretrain one panelist per graph.
    Pretrain(Common),
    /// Train the moderator against the pretrained panel.
    Train(Common),
    /// Score the trained moderator and panel on the test split.
    Eval(Common),
    /// Rerun the whole pipeline for every overlap ratio and seed.
    SweepOverlap(Common),
    /// Pair every panel group with every group's moderator.
    CrossPair(Common),
    /// Render curve or sweep files as SVG charts.
    ExportPlot {
        #[command(flatten)]
        common: Common,
        /// Curve or sweep CSV; curve files may be given several times.
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
    },
}

impl Common {
    /// Config file, then environment, then flags.
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenKg(c) => commands::gen_kg(&c.resolve()?),
        Command::GenData(c) => commands::gen_data(&c.resolve()?),
        Command::Pretrain(c) => commands::pretrain(&c.resolve()?),
        Command::Train(c) => commands::train(&c.resolve()?),
        Command::Eval(c) => commands::eval(&c.resolve()?),
        Command::SweepOverlap(c) => commands::sweep_overlap(&c.resolve()?),
        Command::CrossPair(c) => commands::cross_pair(&c.resolve()?),
        Command::ExportPlot { common, input } => commands::export_plot(&common.resolve()?, &input),
    }
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
