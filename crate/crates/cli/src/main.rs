//! `aqlog`: run, validate and report on datalogger scenarios.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use aqlog_core::analysis::render_table;
use aqlog_core::fixtures::{self, FixtureError, FixtureManifest};
use aqlog_core::scenario::{self, ConfigError, RunError, Scenario};
use clap::{Parser, Subcommand};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "aqlog",
    version,
    about = "Duty-cycled air-quality datalogger simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write logs, server records and reports.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated duration in milliseconds.
        #[arg(long)]
        duration: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run every seed of an inclusive range in parallel, e.g. `seeds=1..8`.
        #[arg(long, value_parser = parse_sweep, conflicts_with = "seed")]
        sweep: Option<(u64, u64)>,
    },
    /// Check a scenario file without running it.
    Validate { config: PathBuf },
    /// Re-derive reports from an existing run directory.
    Report { run_dir: PathBuf },
    /// Generate golden fixtures from a fixture manifest.
    Fixtures { manifest: PathBuf },
}

fn parse_sweep(s: &str) -> Result<(u64, u64), String> {
    let range = s
        .strip_prefix("seeds=")
        .ok_or_else(|| "expected seeds=a..b".to_string())?;
    let (a, b) = range
        .split_once("..")
        .ok_or_else(|| "expected seeds=a..b".to_string())?;
    let a: u64 = a.parse().map_err(|_| format!("bad seed `{a}`"))?;
    let b: u64 = b.parse().map_err(|_| format!("bad seed `{b}`"))?;
    if a > b {
        return Err(format!("empty seed range {a}..{b}"));
    }
    Ok((a, b))
}

fn load(config: &Path) -> Result<Scenario, ExitCode> {
    Scenario::load(config).map_err(|e| {
        eprintln!("{e}");
        ExitCode::from(match e {
            ConfigError::Io { .. } | ConfigError::Invalid(_) => EXIT_CONFIG,
        })
    })
}

fn runtime(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_RUNTIME)
}

fn run_one(sc: &Scenario, out: &Path) -> Result<String, RunError> {
    let done = scenario::run_scenario(sc, out)?;
    Ok(render_table(&done.reports))
}

fn run(
    config: PathBuf,
    seed: Option<u64>,
    duration: Option<u64>,
    out: Option<PathBuf>,
    sweep: Option<(u64, u64)>,
) -> ExitCode {
    let mut sc = match load(&config) {
        Ok(sc) => sc,
        Err(code) => return code,
    };
    if let Some(s) = seed {
        sc.seed = s;
    }
    if let Some(d) = duration {
        sc.duration_ms = d;
    }
    let out = out.unwrap_or_else(|| sc.output_dir.clone());
    let Some((a, b)) = sweep else {
        return match run_one(&sc, &out) {
            Ok(table) => {
                print!("{table}");
                println!("artifacts: {}", out.display());
                ExitCode::SUCCESS
            }
            Err(e) => runtime(e),
        };
    };
    let results: Vec<(u64, Result<String, RunError>)> = thread::scope(|scope| {
        let handles: Vec<_> = (a..=b)
            .map(|seed| {
                let mut sc = sc.clone();
                sc.seed = seed;
                let dir = out.join(format!("seed-{seed}"));
                scope.spawn(move || (seed, run_one(&sc, &dir)))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    let mut code = ExitCode::SUCCESS;
    for (seed, r) in results {
        match r {
            Ok(table) => print!("seed {seed}\n{table}"),
            Err(e) => {
                eprintln!("seed {seed}: {e}");
                code = ExitCode::from(EXIT_RUNTIME);
            }
        }
    }
    code
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            seed,
            duration,
            out,
            sweep,
        } => run(config, seed, duration, out, sweep),
        Command::Validate { config } => match load(&config) {
            Ok(_) => {
                println!("ok");
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Command::Report { run_dir } => match scenario::report_from_dir(&run_dir) {
            Ok(rows) => {
                if let Err(e) = scenario::write_reports(&run_dir, &rows) {
                    return runtime(e);
                }
                print!("{}", render_table(&rows));
                ExitCode::SUCCESS
            }
            Err(e) => runtime(e),
        },
        Command::Fixtures { manifest } => {
            let result = FixtureManifest::load(&manifest).and_then(|m| {
                let base = manifest.parent().unwrap_or(Path::new(""));
                fixtures::generate_all(&m, base)
            });
            match result {
                Ok(files) => {
                    for f in files {
                        println!("{}", f.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e @ (FixtureError::Manifest { .. } | FixtureError::Infeasible { .. })) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_CONFIG)
                }
                Err(e) => runtime(e),
            }
        }
    }
}
