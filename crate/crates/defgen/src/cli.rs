//! The `defgen` command line: `run`, `verify`, `sweep` and `report`.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid config or corrupt
//! transcript, 3 certification failure or verification violation.

use crate::error::{Error, Result};
use crate::harness::{run_experiment, sweep, write_report, Experiment, ExperimentConfig};
use crate::transcript::Transcript;
use clap::{Args, Parser, Subcommand};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const TRANSCRIPT_FILE: &str = "transcript.ndjson";
pub const REPORT_FILE: &str = "report.csv";
pub const RATE_FILE: &str = "rate.csv";

#[derive(Debug, Parser)]
#[command(name = "defgen", version, about = "Defensive forecasting and generation experiments")]
pub struct Cli {
    /// Worker threads for parallel sweeps.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment; writes transcript.ndjson and report.csv.
    Run(RunArgs),
    /// Re-check a transcript and print the first violation.
    Verify {
        transcript: PathBuf,
    },
    /// Run a config over several horizons and fit the growth rate of the largest gap.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Horizons; defaults to the config's `sweep` list.
        #[arg(long = "t", value_delimiter = ',')]
        horizons: Vec<usize>,
    },
    /// Recompute the report from a transcript written by `run`.
    Report {
        transcript: PathBuf,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Corrupt(_) => 2,
        Error::Certification { .. } => 3,
        _ => 1,
    }
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("DEFGEN_LOG", "error");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // Fails only if a global pool already exists, in which case that pool is used.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Verify { transcript } => cmd_verify(&transcript),
        Command::Sweep { run, horizons } => cmd_sweep(&run, &horizons),
        Command::Report { transcript, out } => cmd_report(&transcript, out.as_deref()),
    }
}

pub fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_outputs(e: &Experiment, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    e.transcript.save(&out.join(TRANSCRIPT_FILE))?;
    let f = fs::File::create(out.join(REPORT_FILE))?;
    write_report(&e.report(), f)
}

pub fn cmd_run(args: &RunArgs) -> Result<i32> {
    let cfg = load_config(&args.config, args.seed)?;
    let e = run_experiment(&cfg)?;
    write_outputs(&e, &args.out)?;
    for r in e.report() {
        println!(
            "{} T={} family={} max_oigap={:.6} bound={:.6} ratio={:.4}",
            r.scenario, r.t, r.family, r.max_oigap, r.bound, r.ratio
        );
    }
    Ok(0)
}

fn load_transcript(path: &Path) -> Result<Transcript> {
    Transcript::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Corrupt(format!("{}: {io}", path.display())),
        other => other,
    })
}

pub fn cmd_verify(path: &Path) -> Result<i32> {
    let t = load_transcript(path)?;
    let v = t.verify()?;
    match &v.violation {
        None => {
            println!(
                "pass: {} rounds, max residual {:.3e}, potential {:.6}",
                v.rounds, v.max_residual, v.potential
            );
            Ok(0)
        }
        Some(viol) => {
            println!("fail: {viol}");
            Ok(3)
        }
    }
}

pub fn cmd_sweep(args: &RunArgs, horizons: &[usize]) -> Result<i32> {
    let cfg = load_config(&args.config, args.seed)?;
    let ts: Vec<usize> = if horizons.is_empty() {
        cfg.sweep.clone().unwrap_or_default()
    } else {
        horizons.to_vec()
    };
    let s = sweep(&cfg, &ts)?;
    fs::create_dir_all(&args.out)?;
    let mut w = csv::Writer::from_path(args.out.join(RATE_FILE)).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.write_record(["T", "error", "slope"]).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for (t, err) in &s.points {
        w.write_record([t.to_string(), err.to_string(), s.slope.to_string()])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    write_report(&s.reports, fs::File::create(args.out.join(REPORT_FILE))?)?;
    for (t, err) in &s.points {
        println!("T={t} error={err:.6}");
    }
    println!("slope={:.6}", s.slope);
    Ok(0)
}

pub fn cmd_report(path: &Path, out: Option<&Path>) -> Result<i32> {
    let e = Experiment::from_transcript(load_transcript(path)?)?;
    let rows = e.report();
    match out {
        Some(p) => write_report(&rows, fs::File::create(p)?)?,
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_report(&rows, &mut lock)?;
            lock.flush()?;
        }
    }
    Ok(0)
}
