use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mbk_cli::{run, CliError, Command, RunConfig};

#[derive(Parser)]
#[command(name = "mbk", version, about = "Multi-kernel Boolean model toolchain")]
struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the full-precision teacher.
    Teacher,
    /// Extract Boolean kernels and the residual table.
    Extract,
    /// Allocate kernels per weight under the budget.
    Allocate,
    /// Distill the teacher into the Boolean student.
    Distill,
    /// Evaluate a checkpoint on the validation split.
    Eval,
    /// Time dense against Boolean products.
    Bench,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = (|| -> Result<(), CliError> {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Some(o) = cli.out {
            cfg.out = o;
        }
        let command = match cli.command {
            Cmd::Teacher => Command::Teacher,
            Cmd::Extract => Command::Extract,
            Cmd::Allocate => Command::Allocate,
            Cmd::Distill => Command::Distill,
            Cmd::Eval => Command::Eval,
            Cmd::Bench => Command::Bench,
        };
        run(command, &cfg, &mut std::io::stdout().lock())
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
