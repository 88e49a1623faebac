//! `mqt` — simulate scenes, train the toy tracker, run tracking under each
//! protocol, post-process and evaluate.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{cmd_b2f, cmd_eval, cmd_simulate, cmd_track, cmd_train, load_config, CmdError};

#[derive(Parser)]
#[command(name = "mqt", version, about = "Desk-scale multi-query tracking transformer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic sequence directory.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the model on stored sequences (or generator-streamed scenes).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// A sequence directory, or a directory of sequence directories.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Track a sequence with a trained checkpoint.
    Track {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        /// public | private | private-and-public (overrides the config).
        #[arg(long)]
        mode: Option<String>,
        /// MOT detections file; defaults to <sequence>/det.txt when the
        /// protocol needs one.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Run back-to-front (output frames stay in original numbering).
        #[arg(long)]
        reverse: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Back-to-front refinement of a forward and a backward track file.
    B2f {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        forward: PathBuf,
        #[arg(long)]
        backward: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate MOTA/IDF1 of predictions against ground truth.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CmdError> {
    match cli.cmd {
        Cmd::Simulate { config, out, seed } => {
            let cfg = load_config(config.as_deref(), seed)?;
            cmd_simulate(&cfg, &out)
        }
        Cmd::Train { config, data, out, seed } => {
            let cfg = load_config(config.as_deref(), seed)?;
            cmd_train(&cfg, data.as_deref(), &out)
        }
        Cmd::Track { config, checkpoint, sequence, mode, detections, reverse, out, seed } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            cmd_track(&cfg, &checkpoint, &sequence, detections.as_deref(), reverse, &out)
        }
        Cmd::B2f { config, forward, backward, out } => {
            let cfg = load_config(config.as_deref(), None)?;
            cmd_b2f(&cfg, &forward, &backward, &out)
        }
        Cmd::Eval { config, gt, pred, out } => {
            let cfg = load_config(config.as_deref(), None)?;
            cmd_eval(&cfg, &gt, &pred, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes.
            if e.use_stderr() {
                eprint!("{}", e);
                return ExitCode::from(1);
            }
            print!("{}", e);
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
