use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use dpa_cli::commands;
use dpa_cli::{Preset, RunConfig};
use dpa_core::dpa::Regime;

#[derive(Parser)]
#[command(name = "dpa", version, about = "Discriminative pre-training for academic performance prediction")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Base settings: `full` (full-size defaults) or `desk` (tiny, minutes on one core).
    #[arg(long, global = true, default_value = "full")]
    preset: Preset,
    /// TOML file layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set pretrain.steps=100`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    regime: Option<Regime>,
    /// Corpus directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate pre-training and fine-tuning corpora.
    GenData,
    /// Pre-train the configured regime.
    Pretrain {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Cross-validated score fine-tuning.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pre-training metrics of a checkpoint on held-out sequences.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Every regime, seed and label fraction of the sweep settings.
    Sweep,
    /// Time and workspace of FAVOR+ against exact attention.
    BenchAttention,
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut sets = c.overrides.clone();
    if let Some(s) = c.seed {
        sets.push(format!("seed={s}"));
    }
    if let Some(r) = c.regime {
        sets.push(format!("regime=\"{}\"", r.name()));
    }
    if let Some(d) = &c.data {
        sets.push(format!("data_dir={}", toml::Value::String(d.display().to_string())));
    }
    if let Some(o) = &c.out {
        sets.push(format!("out_dir={}", toml::Value::String(o.display().to_string())));
    }
    RunConfig::resolve(c.preset, c.config.as_deref(), &sets)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::GenData => {
            commands::gen_data(&cfg)?;
        }
        Command::Pretrain { resume } => {
            commands::pretrain(&cfg, resume)?;
        }
        Command::Finetune { checkpoint } => {
            commands::finetune(&cfg, checkpoint.as_deref())?;
        }
        Command::Eval { checkpoint } => {
            commands::eval(&cfg, checkpoint.as_deref())?;
        }
        Command::Sweep => {
            commands::sweep(&cfg)?;
        }
        Command::BenchAttention => {
            commands::bench_attention(&cfg)?;
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

/// Error class for the one-line diagnostic.
fn class(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<dpa_core::Error>() {
            return e.class();
        }
        if cause.is::<toml::de::Error>() {
            return "config";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<csv::Error>() {
            return "io";
        }
    }
    "error"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{}]: {msg}", class(&e));
            ExitCode::FAILURE
        }
    }
}
