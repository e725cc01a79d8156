use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rcfd_core::cli::{Command, Context};
use rcfd_core::Error;

#[derive(Parser, Debug)]
#[command(name = "rcfd", version, about = "Train, distill and evaluate toy diffusion samplers")]
struct Cli {
    /// TOML run config; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; overrides `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write wall-clock columns as 0 so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train the base denoiser.
    TrainBase,
    /// Train the in-domain and shifted feature classifiers.
    TrainClassifier,
    /// Execute the configured distillation plan.
    Distill,
    /// Draw samples and a trajectory dump.
    Sample {
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 1024)]
        count: usize,
        /// Checkpoint stage name (e.g. base, pd, rcfd).
        #[arg(long)]
        stage: Option<String>,
    },
    /// Append a metrics row for a sampler.
    Eval {
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        stage: Option<String>,
    },
    /// Per-step prediction entropy profile.
    DiagnoseEntropy {
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        stage: Option<String>,
    },
    /// CFD temperature ablation against the sweep teacher.
    SweepTau {
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Redraw figures from the metrics table.
    Plot,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::TrainBase => Command::TrainBase,
            Cmd::TrainClassifier => Command::TrainClassifier,
            Cmd::Distill => Command::Distill,
            Cmd::Sample { steps, count, stage } => Command::Sample { steps, count, stage },
            Cmd::Eval { steps, stage } => Command::Eval { steps, stage },
            Cmd::DiagnoseEntropy { steps, stage } => Command::DiagnoseEntropy { steps, stage },
            Cmd::SweepTau { values } => Command::SweepTau { values },
            Cmd::Plot => Command::Plot,
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<String> {
    let ctx = Context::from_args(cli.config.as_deref(), cli.seed, cli.out, cli.deterministic)?;
    Ok(ctx.run(&cli.command.into())?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(msg) => {
            if !msg.is_empty() {
                println!("{msg}");
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<Error>().map(Error::exit_code).unwrap_or(1);
            ExitCode::from(code as u8)
        }
    }
}
