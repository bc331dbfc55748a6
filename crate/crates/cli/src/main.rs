use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gka::numerics::Precision;
use gka_cli::bench::{self, SolverBenchConfig};
use gka_cli::equivalence::{run_equivalence, EquivalenceConfig};
use gka_cli::gradcheck::{run_grad_check, GradCheckConfig};
use gka_cli::mqar_cmd::{self, MqarRunConfig};
use gka_cli::report::{all_pass, csv_writer, write_json, Check};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "gka", version, about = "Solver benchmarks, gradient checks and MQAR runs for the gka layer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config for the subcommand; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    /// Inner solver iterations.
    #[arg(long, global = true)]
    iters: Option<usize>,
    #[arg(long, global = true, default_value = "gka-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Residual traces of CH, GD, AGD and CG on normalized key covariances.
    SolverBench,
    /// Gradient deviation of the solver backward passes from the exact solve.
    GradCheck,
    /// Chunk-vs-sequential, Kalman-vs-ridge and reduction oracles.
    Equivalence,
    /// Train the toy model on associative recall over mixers, learning rates and seeds.
    Mqar,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Full,
    Single,
    Bf16,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Full => Precision::Full,
            PrecisionArg::Single => Precision::Single,
            PrecisionArg::Bf16 => Precision::Bf16,
        }
    }
}

fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", p.display()))
        }
    }
}

fn report(checks: &[Check]) -> bool {
    for c in checks {
        println!("{}", c.line());
    }
    all_pass(checks)
}

fn run(cli: Cli) -> Result<bool> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let precision = cli.precision.map(Precision::from);
    let config = cli.config.as_deref();
    match cli.command {
        Command::SolverBench => {
            let mut cfg: SolverBenchConfig = load(config)?;
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            cfg.precision = precision.unwrap_or(cfg.precision);
            cfg.iters = cli.iters.unwrap_or(cfg.iters);
            let (rows, summary) = bench::run_solver_bench(&cfg)?;
            let mut w = csv_writer(&cli.out.join("solver_bench.csv"), bench::SCHEMA, &bench::HEADER)?;
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            write_json(&cli.out.join("solver_bench_summary.json"), &summary)?;
            Ok(report(&summary.checks))
        }
        Command::GradCheck => {
            let mut cfg: GradCheckConfig = load(config)?;
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            cfg.precision = precision.unwrap_or(cfg.precision);
            cfg.iters = cli.iters.unwrap_or(cfg.iters);
            let rep = run_grad_check(&cfg)?;
            write_json(&cli.out.join("grad_check.json"), &rep)?;
            Ok(report(&rep.checks))
        }
        Command::Equivalence => {
            let mut cfg: EquivalenceConfig = load(config)?;
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            let rep = run_equivalence(&cfg)?;
            write_json(&cli.out.join("equivalence.json"), &rep)?;
            Ok(report(&rep.checks))
        }
        Command::Mqar => {
            let mut cfg: MqarRunConfig = load(config)?;
            if let Some(s) = cli.seed {
                cfg.seeds = vec![s];
            }
            cfg.precision = precision.unwrap_or(cfg.precision);
            cfg.iters = cli.iters.or(cfg.iters);
            let (rows, summary) = mqar_cmd::run_mqar(&cfg, Some(&cli.out))?;
            let mut w = csv_writer(&cli.out.join("mqar_runs.csv"), mqar_cmd::SCHEMA, &mqar_cmd::HEADER)?;
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            write_json(&cli.out.join("mqar_summary.json"), &summary)?;
            for (mixer, s) in &summary.mixers {
                println!("{mixer}: median best accuracy {:.4} over {} seed(s)", s.median_best_accuracy, s.best_per_seed.len());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("GKA_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // Only fails if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
