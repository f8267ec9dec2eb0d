use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lora2::checkpoint::read_checkpoint;
use lora2::config::read_config;
use lora2::diagnostics::{gradient_suite, selftest, ENTROPY_GRAD_TOLERANCE, LOSS_GRAD_TOLERANCE};
use lora2::report::{write_run, write_sweep, SWEEP_FILE};
use lora2::train::{sweep, train_run};
use lora2::Error;

#[derive(Parser)]
#[command(name = "lora2", version, about = "Adaptive-rank low-rank adapters on a synthetic attention task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its checkpoint and reports.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fixed-rank runs at each rank plus one adaptive run.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64,128,256,512")]
        ranks: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-layer ranks and size of a checkpoint.
    Report {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Randomized property suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. }
            | Error::Contract(_)
            | Error::Domain(_)
            | Error::Construction(_)
            | Error::RankTooLarge { .. } => Failure::Validation(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Train { config, out, seed } => {
            let mut cfg = read_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let run = train_run(&cfg)?;
            let files = write_run(&cfg, &run, &out)?;
            println!(
                "trained {} steps: eval mse {:.6e} -> {:.6e}",
                run.history.records.len(),
                run.history.initial_eval.mse,
                run.history.final_eval.mse
            );
            for (l, d) in run.model.layers().iter().zip(&run.history.final_ranks) {
                println!("{:<14} D={d}", l.name());
            }
            println!("checkpoint {} ({} bytes)", files.checkpoint.display(), files.checkpoint_bytes);
        }
        Command::Sweep { config, ranks, out } => {
            let cfg = read_config(&config)?;
            cfg.validate()?;
            if ranks.is_empty() || ranks.contains(&0) {
                return Err(Failure::Validation("ranks must be a non-empty list of positive integers".into()));
            }
            let rows = sweep(&cfg, &ranks)?;
            std::fs::create_dir_all(&out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
            let path = out.join(SWEEP_FILE);
            write_sweep(&rows, &path)?;
            for r in &rows {
                println!("{:<16} mse={:.6e} params={} bytes={}", r.label, r.final_mse, r.params, r.bytes);
            }
            println!("wrote {}", path.display());
        }
        Command::Gradcheck { trials, seed } => {
            if trials == 0 {
                return Err(Failure::Validation("--trials must be positive".into()));
            }
            let report = gradient_suite(trials, seed)?;
            println!(
                "{trials} instances: worst rel. error B {:.3e}, A {:.3e}, nu {:.3e} (tol {LOSS_GRAD_TOLERANCE:e}); entropy {:.3e} (tol {ENTROPY_GRAD_TOLERANCE:e})",
                report.worst_b, report.worst_a, report.worst_nu, report.worst_entropy
            );
            if !report.passed() {
                return Err(Failure::Runtime("gradient check failed".into()));
            }
            println!("PASS");
        }
        Command::Report { ckpt } => {
            let records = read_checkpoint(&ckpt)?;
            let bytes = std::fs::metadata(&ckpt).map_err(|e| Failure::Runtime(e.to_string()))?.len();
            for r in &records {
                println!("{:<14} {}x{} D={} nu={:.6}", r.name, r.m, r.n, r.d, r.nu);
            }
            println!("{} layers, {bytes} bytes", records.len());
        }
        Command::Selftest { seed } => {
            let outcomes = selftest(seed);
            for o in &outcomes {
                println!("{} {:<16} {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
            }
            if outcomes.iter().any(|o| !o.passed) {
                return Err(Failure::Runtime("selftest failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
