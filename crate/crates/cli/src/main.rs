use clap::{Args, Parser, Subcommand};
use nashflow::harness::{self, Command, Overrides, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

/// Identity verification and stochastic Lagrangian flow runs on embedded
/// manifolds.
#[derive(Parser, Debug)]
#[command(name = "nashflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run the identity catalog; exit 2 if any identity fails.
    Verify(Flags),
    /// Monte Carlo heat flow against the analytic Hodge decay.
    Heat(Flags),
    /// Fixed-point Monte Carlo Navier-Stokes against the spectral reference.
    Ns(Flags),
    /// Mass, mean density and volume preservation of the flow.
    Density(Flags),
}

#[derive(Args, Debug)]
struct Flags {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (overrides NASHFLOW_THREADS and the config).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, flags) = match cli.command {
        Cmd::Verify(f) => (Command::Verify, f),
        Cmd::Heat(f) => (Command::Heat, f),
        Cmd::Ns(f) => (Command::Ns, f),
        Cmd::Density(f) => (Command::Density, f),
    };
    let code = match execute(command, flags) {
        Ok(out) => {
            for f in &out.failures {
                eprintln!("FAIL {f}");
            }
            println!("{}", out.summary);
            out.exit_code
        }
        Err(e) => {
            eprintln!("error: {e}");
            harness::exit_code_for(&e)
        }
    };
    ExitCode::from(code as u8)
}

fn execute(command: Command, flags: Flags) -> nashflow::error::Result<harness::Outcome> {
    let mut cfg = match &flags.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides { seed: flags.seed, threads: flags.threads, out: flags.out })?;
    harness::run(command, &cfg)
}
