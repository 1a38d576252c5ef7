use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use placerec::config::{Proposal, RunConfig};
use placerec::error::Result;
use placerec::pipeline;

#[derive(Parser)]
#[command(
    name = "placerec",
    version,
    about = "GPS-supervised place recognition and loop-closure SLAM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides paths.out_dir.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct WithModel {
    #[command(flatten)]
    common: Common,
    /// Model checkpoint; defaults to <out-dir>/model.json.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic training and test sessions.
    Generate(Common),
    /// Label the training sessions and train the embedding.
    Train(Common),
    /// Precision-recall and histogram comparison on the test session.
    Eval {
        #[command(flatten)]
        args: WithModel,
        /// Proposal mechanism for the precision-recall sweep.
        #[arg(long, value_enum)]
        proposal: Option<ProposalArg>,
    },
    /// Loop-closure pose-graph experiment on the test session.
    Slam(WithModel),
    /// generate, train, eval and slam in sequence.
    Pipeline(Common),
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ProposalArg {
    Epsilon,
    Knn,
}

fn load(c: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &c.out_dir {
        cfg.paths.out_dir = Some(dir.clone());
    }
    cfg.validate()?;
    let out = cfg.out_dir();
    Ok((cfg, out))
}

fn print<T: Serialize>(value: &T) {
    if let Ok(text) = serde_json::to_string_pretty(value) {
        println!("{text}");
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let (cfg, out) = load(&c)?;
            for dir in pipeline::cmd_generate(&cfg, &out)? {
                println!("{}", dir.display());
            }
        }
        Command::Train(c) => {
            let (cfg, out) = load(&c)?;
            print(&pipeline::cmd_train(&cfg, &out)?);
        }
        Command::Eval { args, proposal } => {
            let (mut cfg, out) = load(&args.common)?;
            if let Some(p) = proposal {
                cfg.eval.proposal = match p {
                    ProposalArg::Epsilon => Proposal::Epsilon,
                    ProposalArg::Knn => Proposal::Knn,
                };
            }
            print(&pipeline::cmd_eval(&cfg, &out, args.checkpoint.as_deref())?);
        }
        Command::Slam(args) => {
            let (cfg, out) = load(&args.common)?;
            print(&pipeline::cmd_slam(&cfg, &out, args.checkpoint.as_deref())?);
        }
        Command::Pipeline(c) => {
            let (cfg, out) = load(&c)?;
            print(&pipeline::cmd_pipeline(&cfg, &out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
