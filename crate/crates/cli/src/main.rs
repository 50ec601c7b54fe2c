use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use inlierq::config::{ExperimentConfig, ReportFormat};
use inlierq::experiment::{run_experiment, Verb};
use inlierq::report::emit_reports;
use inlierq::selftest::run_selftest;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(
    name = "inlierq",
    version,
    about = "Inlier-centric post-training quantization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment config; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the model seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the report format.
    #[arg(long, global = true, value_enum)]
    format: Option<ReportFormat>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Calibrate once with InlierQ at the configured point.
    Calibrate,
    /// Run every configured method at every configured bit-width pair.
    Compare,
    /// Sweep the inlier threshold.
    SweepTau,
    /// Sweep the calibration top-K.
    SweepK,
    /// Run the invariant battery.
    Selftest,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let verb = match cli.command {
        Command::Calibrate => Verb::Calibrate,
        Command::Compare => Verb::Compare,
        Command::SweepTau => Verb::SweepTau,
        Command::SweepK => Verb::SweepK,
        Command::Selftest => return selftest(),
    };

    let loaded = match &cli.config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::default()),
    };
    let mut cfg = match loaded {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.output.dir = out;
    }
    if let Some(format) = cli.format {
        cfg.output.format = format;
    }
    if verb == Verb::SweepTau && cfg.sweep.tau.is_empty() || verb == Verb::SweepK && cfg.sweep.k.is_empty() {
        eprintln!("error: the sweep list for this command is empty");
        return ExitCode::from(EXIT_CONFIG);
    }
    if verb == Verb::Compare && (cfg.sweep.methods.is_empty() || cfg.sweep.bits.is_empty()) {
        eprintln!("error: `compare` needs at least one method and one bit-width pair");
        return ExitCode::from(EXIT_CONFIG);
    }

    let records = match run_experiment(&cfg, verb) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    };
    let written = match emit_reports(&records, cfg.output.format, &cfg.output.dir, verb) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    };
    for r in &records {
        match (r.failed, r.nll_proxy, r.peak_hit) {
            (false, Some(nll), Some(hit)) => println!(
                "{} {} w{}a{} tau={} k={} nll_proxy={nll:.6} peak_hit={hit:.3}",
                r.exp_id, r.method, r.bits_w, r.bits_a, r.tau, r.k
            ),
            _ => println!("{} {} FAILED: {}", r.exp_id, r.method, r.reason),
        }
    }
    for p in &written {
        println!("wrote {}", p.display());
    }
    if records.iter().any(|r| r.failed) {
        ExitCode::from(EXIT_RUNTIME)
    } else {
        ExitCode::SUCCESS
    }
}

fn selftest() -> ExitCode {
    let mut ok = true;
    for check in run_selftest() {
        match &check.outcome {
            Ok(()) => println!("PASS {}", check.name),
            Err(msg) => {
                ok = false;
                println!("FAIL {}: {msg}", check.name);
            }
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_RUNTIME)
    }
}
