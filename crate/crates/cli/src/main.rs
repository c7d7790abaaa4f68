//! `specscale` command-line front end.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 the single run
//! diverged, 3 I/O or other runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use specscale::data::synthetic_corpus;
use specscale::experiment::{
    dump_spectra, generate_report, run_single, run_sweep, ExperimentConfig, ExperimentError, RunRecord, RunStatus,
};
use specscale::fit::fit_power_law;

#[derive(Parser)]
#[command(name = "specscale", version, about = "Optimizer-dependent spectral scaling of transformer FFN representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Reuse a completed run in the output directory when its config matches.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one model.
    Run(RunArgs),
    /// Run the Cartesian product of the sweep axes and fit the grid.
    Sweep {
        #[command(flatten)]
        args: RunArgs,
        /// Concurrent runs; overrides the config's `jobs`.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Write report CSVs for a sweep directory.
    Report { dir: PathBuf },
    /// Dump normalized eigenspectra of a finished run.
    Spectrum {
        run_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a power law to a `width,rank` CSV.
    Fit {
        points: PathBuf,
        /// Write the fit as JSON instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic byte corpus.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1_200_000)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the default experiment config.
    DefaultConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_points(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed = match fields.as_slice() {
            [d, r] => d.parse::<f64>().ok().zip(r.parse::<f64>().ok()),
            _ => None,
        };
        match parsed {
            Some(p) => points.push(p),
            None if i == 0 => {}
            None => bail!(ExperimentError::Config(format!("{}:{}: expected `width,rank`", path.display(), i + 1))),
        }
    }
    Ok(points)
}

/// Returns the process exit code on success.
fn execute(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let run = cfg.single_run();
            let reused = if args.resume { RunRecord::load_matching(&cfg.out_dir, &run) } else { None };
            let record = match reused {
                Some(r) => {
                    eprintln!("reusing completed run in {}", cfg.out_dir.display());
                    r
                }
                None => run_single(&run, &cfg.out_dir)?,
            };
            if let Some(ck) = record.final_checkpoint() {
                println!("step {} val_loss {:.4} ppl {:.2}", ck.step, ck.val_loss, ck.perplexity);
            }
            if let Some(d) = &record.divergence {
                eprintln!("diverged at step {}: {}", d.step, d.reason);
                return Ok(2);
            }
            Ok(0)
        }
        Command::Sweep { args, jobs } => {
            let mut cfg = load_config(&args)?;
            if let Some(j) = jobs {
                cfg.jobs = j;
            }
            let out = run_sweep(&cfg, &cfg.out_dir)?;
            for r in &out.manifest.runs {
                let status = match &r.status {
                    RunStatus::Completed => format!("ppl {:.2}", r.final_perplexity.unwrap_or(f64::NAN)),
                    RunStatus::Diverged(why) => format!("diverged ({why})"),
                    RunStatus::Failed(why) => format!("failed ({why})"),
                };
                println!("{:<32} {status}", r.id);
            }
            println!("{} fits, {} runs reused", out.grid.len(), out.reused);
            Ok(0)
        }
        Command::Report { dir } => {
            for p in generate_report(&dir)? {
                println!("{}", p.display());
            }
            Ok(0)
        }
        Command::Spectrum { run_dir, out } => {
            let files = dump_spectra(&run_dir, &out)?;
            println!("wrote {} spectra to {}", files.len(), out.display());
            Ok(0)
        }
        Command::Fit { points, out } => {
            let fit = fit_power_law(&read_points(&points)?).map_err(ExperimentError::from)?;
            let json = serde_json::to_string_pretty(&fit)?;
            match out {
                Some(p) => std::fs::write(&p, json).with_context(|| format!("writing {}", p.display()))?,
                None => println!("{json}"),
            }
            Ok(0)
        }
        Command::SynthCorpus { out, bytes, seed } => {
            std::fs::write(&out, synthetic_corpus(bytes, seed)).with_context(|| format!("writing {}", out.display()))?;
            Ok(0)
        }
        Command::DefaultConfig { out } => {
            let json = ExperimentConfig::default().to_json();
            match out {
                Some(p) => std::fs::write(&p, json).with_context(|| format!("writing {}", p.display()))?,
                None => println!("{json}"),
            }
            Ok(0)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<ExperimentError>() {
        if e.is_config() {
            return 1;
        }
        if e.is_io() {
            return 3;
        }
        return match e {
            ExperimentError::Fit(_) => 1,
            _ => 3,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 3;
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
