use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sald::harness::validate::validate_with;
use sald::harness::{
    run_experiment, run_sweep, ExperimentSpec, RawConfig, Suite, SweepSpec,
    Task, TaskSetup, ValidationHooks,
};
use sald::Result;

#[derive(Parser)]
#[command(name = "sald", version, about = "Slowed annealed Langevin samplers on analytic guided diffusion targets")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its CSV rows and JSON summary.
    Run {
        config: PathBuf,
        /// Override a config key, e.g. `--set r=10`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// CSV output path (the summary goes next to it as .json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every method in `methods` at every budget.
    Sweep {
        config: PathBuf,
        /// Budgets, e.g. `1,2,4,10,50,100`.
        #[arg(long = "r")]
        r_values: Option<String>,
        /// Methods, e.g. `sald,va_sald,doit`.
        #[arg(long)]
        methods: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Directory for per-run files and sweep.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the self-test suites and print a pass/fail table.
    Validate {
        #[arg(default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the guided terminal target of a task as x,y,density CSV.
    DumpTarget {
        task: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(config: &Path, overrides: &[String]) -> Result<RawConfig> {
    let mut raw = RawConfig::load(config)?;
    for o in overrides {
        raw.set(o)?;
    }
    Ok(raw)
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Run { config, overrides, out } => {
            let mut spec = ExperimentSpec::from_raw(&load(&config, &overrides)?)?;
            if out.is_some() {
                spec.output = out;
            }
            let outcome = run_experiment(&spec)?;
            let s = &outcome.summary;
            println!(
                "{} {} r={}: steps={} particles={} effective={} terminal_kl={:.4} mean_penalty={:.4}",
                s.task, s.method, s.r, s.steps, s.particles, s.effective_particles, s.terminal_kl, s.terminal_mean_penalty
            );
            if spec.output.is_none() {
                sald::harness::run::write_rows(&outcome.rows, io::stdout().lock())?;
            }
            Ok(true)
        }
        Command::Sweep { config, r_values, methods, overrides, out } => {
            let mut raw = load(&config, &overrides)?;
            if let Some(r) = r_values {
                raw.set(&format!("r_values={r}"))?;
            }
            if let Some(m) = methods {
                raw.set(&format!("methods={m}"))?;
            }
            let sweep = SweepSpec::from_raw(&raw)?;
            let outcome = run_sweep(&sweep, out.as_deref())?;
            outcome.write_csv(io::stdout().lock())?;
            Ok(outcome.failures() == 0)
        }
        Command::Validate { suite, seed } => {
            let report = validate_with(suite.parse::<Suite>()?, seed, ValidationHooks::default());
            print!("{}", report.to_table());
            Ok(report.all_passed())
        }
        Command::DumpTarget { task, overrides, out } => {
            let mut raw = RawConfig::default();
            raw.set(&format!("task={}", task.parse::<Task>()?))?;
            for o in &overrides {
                raw.set(o)?;
            }
            let spec = ExperimentSpec::from_raw(&raw)?;
            let setup = TaskSetup::build(&spec)?;
            setup.target.write_csv(sink(out.as_deref())?)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set thread count: {e}");
            return ExitCode::FAILURE;
        }
    }
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let mut msg = e.to_string();
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                if !msg.contains(&s.to_string()) {
                    msg.push_str(&format!(": {s}"));
                }
                src = s.source();
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
