use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ospd_core::cli::{cmd_bench, cmd_demo, cmd_verify, exit_code, FileConfig};
use ospd_core::verify::Suite;

#[derive(Parser)]
#[command(name = "ospd", version, about = "Partitioned decoding with prompt obfuscation on a toy transformer")]
struct Args {
    #[command(subcommand)]
    command: Command,

    /// TOML config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Where to write the transcript, check report or CSV
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Tag, obfuscate and decode the demo prompt end to end
    Demo,
    /// Run a property suite: theorem1 (alias split), gqs, bounds, protocol or all
    Verify {
        #[arg(default_value = "all")]
        suite: String,
    },
    /// Latency and memory sweep across serving modes
    Bench,
}

fn run(args: &Args) -> ospd_core::Result<i32> {
    let cfg = match &args.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let out = args.out.as_deref();
    let mut stdout = io::stdout().lock();
    match &args.command {
        Command::Demo => cmd_demo(&cfg, args.seed, out, args.verbose, &mut stdout),
        Command::Verify { suite } => {
            let seed = args.seed.or(cfg.seed).unwrap_or(0);
            cmd_verify(suite.parse::<Suite>()?, seed, out, &mut stdout)
        }
        Command::Bench => cmd_bench(&cfg, args.seed, out, &mut stdout),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let code = match run(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(io::stderr(), "error: {e}");
            exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
