use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coevo::run::{self, RunError};

#[derive(Parser)]
#[command(name = "coevo", version, about = "Continual evolutionary search for symbolic solutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a run described by a TOML config.
    Run {
        config: PathBuf,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Write CSV series and a summary under <dir>/report.
    Report { dir: PathBuf },
    /// Re-execute a run against its recorded transcript and compare.
    Replay {
        dir: PathBuf,
        /// Also require every prompt hash to match the recording.
        #[arg(long)]
        strict: bool,
    },
}

fn finish<T>(result: Result<T, RunError>, on_ok: impl FnOnce(T)) -> ExitCode {
    let code = run::exit_code(&result);
    match result {
        Ok(v) => on_ok(v),
        Err(e) => eprintln!("coevo: {e}"),
    }
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, resume } => finish(run::cmd_run(&config, resume), |state| {
            let best = state.best().map(|s| s.math_text.trim().to_string()).unwrap_or_default();
            println!(
                "finished: {} generations, {} iterations, best NMSE {:e}, best {best}",
                state.generation,
                state.iteration,
                state.best_nmse()
            );
        }),
        Command::Report { dir } => finish(run::cmd_report(&dir), |files| {
            for f in files {
                println!("{}", f.display());
            }
        }),
        Command::Replay { dir, strict } => finish(run::cmd_replay(&dir, strict), |r| {
            println!(
                "replay matched: {} generations, {} transcript entries, {} solutions",
                r.generation, r.entries_used, r.solutions
            );
        }),
    }
}
