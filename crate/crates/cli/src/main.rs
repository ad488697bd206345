use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tta_cli::{run, Command};

#[derive(Parser)]
#[command(name = "tta", version, about = "Token timestep allocation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the denoiser and the guidance classifier.
    Train(Common),
    /// Progressively reduce the teacher's step count.
    Reduce(Common),
    /// Sample every configured (policy, lambda) run with traces.
    Generate(Common),
    /// Score generation traces and compare policies.
    Analyze(Common),
    /// Tabulate the simplex-to-discrete schedule map.
    Duality(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Replaces `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the master seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (command, args) = match cli.command {
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Reduce(a) => (Command::Reduce, a),
        Cmd::Generate(a) => (Command::Generate, a),
        Cmd::Analyze(a) => (Command::Analyze, a),
        Cmd::Duality(a) => (Command::Duality, a),
    };
    match run(command, &args.config, args.out.as_deref(), args.seed) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tta: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
