use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scrl::cli::{self, Stage, TrainOptions};
use scrl::retrieval::GalleryMode;

#[derive(Parser)]
#[command(name = "scrl", version, about = "Self-supervised clip retrieval on synthetic paired screenings")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the paired synthetic corpus.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Overwrite an existing corpus directory.
        #[arg(long)]
        force: bool,
    },
    /// Masked-autoencoder pretraining and/or contrastive fine-tuning.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "both")]
        stage: Stage,
        /// Contrastive stage from a random encoder instead of the stage-1 checkpoint.
        #[arg(long)]
        from_scratch: bool,
        #[arg(long)]
        force: bool,
        /// Continue an interrupted pretraining run.
        #[arg(long)]
        resume: bool,
    },
    /// Build the gallery index and score every manifest query.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        mode: Option<GalleryMode>,
    },
    /// Summarize all evaluations under the output directory.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let code = match args.cmd {
        Cmd::GenData { config, force } => cli::cmd_gen_data(&config, force),
        Cmd::Train { config, stage, from_scratch, force, resume } => {
            cli::cmd_train(&config, stage, &TrainOptions { from_scratch, force, resume })
        }
        Cmd::Eval { config, checkpoint, mode } => cli::cmd_eval(&config, checkpoint.as_deref(), mode),
        Cmd::Report { config } => cli::cmd_report(&config),
    };
    ExitCode::from(code as u8)
}
