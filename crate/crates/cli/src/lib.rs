//! Command-line toolchain for multi-kernel Boolean models: configuration,
//! the checkpoint container, the pipeline commands and the microbenchmark.
//!
//! A typical run:
//!
//! ```text
//! mbk teacher  --out run      # train and save the full-precision teacher
//! mbk extract  --out run      # Boolean student + residual table
//! mbk allocate --out run      # importance-weighted kernel allocation
//! mbk distill  --out run      # distillation finetune + metrics log
//! mbk eval     --out run      # one JSON line of validation metrics
//! mbk bench                   # dense vs Boolean product timings
//! ```

pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod config;
mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Teacher,
    Extract,
    Allocate,
    Distill,
    Eval,
    Bench,
}

/// Runs one command, writing its console output to `out`.
pub fn run(command: Command, cfg: &RunConfig, out: &mut dyn std::io::Write) -> CliResult<()> {
    match command {
        Command::Teacher => commands::teacher(cfg, out),
        Command::Extract => commands::extract(cfg, out),
        Command::Allocate => commands::allocate(cfg, out),
        Command::Distill => commands::distill(cfg, out),
        Command::Eval => commands::eval(cfg, out),
        Command::Bench => commands::bench(cfg, out),
    }
}
