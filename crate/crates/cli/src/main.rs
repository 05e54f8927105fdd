use std::ffi::OsString;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spde_runner::config::{Experiment, RunConfig, SeedRange};
use spde_runner::{run, RunError, RunOptions};

#[derive(Parser)]
#[command(name = "spde", version, about = "Stochastic heat equation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment named in a config file.
    Run {
        config: PathBuf,
        /// Seed range a..b (decimal or 0x-hex), replacing the config's.
        #[arg(long)]
        seeds: Option<String>,
        /// Output directory (overrides SPDE_OUT_DIR and the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Print the experiments with their default thresholds.
    ListExperiments,
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
}

fn load(path: &Path, seeds: Option<&str>) -> Result<RunConfig, RunError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seeds {
        cfg.seeds = s.parse::<SeedRange>()?;
        cfg.validate()?;
    }
    Ok(cfg)
}

/// Exit status: 0 success, 1 failed assertion or runtime error, 2 bad config or usage.
fn cli_main(args: impl IntoIterator<Item = OsString>, out: &mut impl Write, err: &mut impl Write) -> io::Result<u8> {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            write!(if code == 0 { out as &mut dyn Write } else { err as &mut dyn Write }, "{e}")?;
            return Ok(code);
        }
    };
    let fail = |err: &mut dyn Write, e: RunError| -> io::Result<u8> {
        writeln!(err, "error: {e}")?;
        Ok(e.exit_code() as u8)
    };
    match cli.command {
        Command::ListExperiments => {
            for e in Experiment::ALL {
                writeln!(out, "{:<20} {}", e.name(), e.summary())?;
                for (k, v) in e.thresholds() {
                    writeln!(out, "{:<20}   {k} = {v}", "")?;
                }
            }
            Ok(0)
        }
        Command::Validate { config } => match load(&config, None) {
            Ok(cfg) => {
                writeln!(out, "ok: {} ({}x{}, T = {}, seeds {})", cfg.experiment, cfg.nx, cfg.nt, cfg.t_final, cfg.seeds)?;
                Ok(0)
            }
            Err(e) => fail(err, e),
        },
        Command::Run { config, seeds, out: dir, threads } => {
            let cfg = match load(&config, seeds.as_deref()) {
                Ok(c) => c,
                Err(e) => return fail(err, e),
            };
            let outcome = match run(&cfg, &RunOptions { out: dir, threads }) {
                Ok(o) => o,
                Err(e) => return fail(err, e),
            };
            for c in &outcome.report.checks {
                writeln!(out, "{c}")?;
            }
            for n in &outcome.report.notes {
                writeln!(out, "[info] {n}")?;
            }
            let failed = outcome.report.checks.iter().filter(|c| !c.passed).count();
            writeln!(out, "{}: {} checks, {failed} failed; artifacts in {}", cfg.experiment, outcome.report.checks.len(), outcome.out_dir.display())?;
            Ok(u8::from(failed > 0))
        }
    }
}

fn main() -> ExitCode {
    match cli_main(std::env::args_os(), &mut io::stdout().lock(), &mut io::stderr().lock()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
