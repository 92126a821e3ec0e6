//! `fedmoe` command-line front end: `run`, `sweep` and `compare`.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.

pub mod compare;
pub mod sweep;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fedmoe_core::config::ExperimentConfig;
use fedmoe_core::experiment::run_experiment;
use fedmoe_core::{Error, Result};

/// Environment variable naming the default root for run directories.
pub const OUTPUT_ROOT_ENV: &str = "FEDMOE_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "fedmoe", version, about = "Federated fine-tuning of sparse MoE adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write its artifacts to a fresh run directory.
    Run(RunArgs),
    /// Run the cross product of a value grid and summarize the final round.
    Sweep(SweepArgs),
    /// Merge the global rows of several runs side by side, keyed by round.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Configuration file with `dotted.key = value` lines.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Start from a named preset (agnews-like, cifar-like) before the file.
    #[arg(long)]
    pub preset: Option<String>,
    /// Exact directory to write into instead of a generated one under the output root.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides as `--key value` or `--key=value`, e.g. `--aux.lambda 1e-4`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Grid file: one axis per line, `key = v1, v2` or `k1,k2 = a1:b1, a2:b2`.
    #[arg(short, long)]
    pub grid: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Run directories, each holding a metrics.csv.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Write the merged CSV here instead of standard output.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

/// Parses `--key value` / `--key=value` pairs.
pub fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = tokens.iter();
    while let Some(tok) = it.next() {
        let body = tok
            .strip_prefix("--")
            .ok_or_else(|| Error::config(tok.clone(), "overrides look like `--section.key value`"))?;
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::config(body, "missing value"))?;
                (body.to_string(), v.clone())
            }
        };
        if !key.contains('.') {
            return Err(Error::config(key, "override keys are dotted, e.g. `federation.rounds`"));
        }
        out.push((key, value));
    }
    Ok(out)
}

/// Preset, then file, then overrides; later sources win. Validates the result.
pub fn resolve_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.preset {
        Some(name) => ExperimentConfig::preset(name)?,
        None => ExperimentConfig::default(),
    };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text)?;
    }
    for (k, v) in parse_overrides(&args.overrides)? {
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Root for generated run directories: `output.dir`, else the environment
/// variable, else `./runs`.
pub fn output_root(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Creates `<root>/<timestamp>-<hash>[-n]`, never reusing an existing path.
pub fn fresh_run_dir(root: &Path, cfg: &ExperimentConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{stamp}-{}", cfg.hash());
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(dir, e)),
        }
    }
    unreachable!("unbounded search")
}

/// An explicit `--out` directory must be new or empty.
pub fn claim_dir(dir: &Path) -> Result<PathBuf> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() {
            return Err(Error::config(
                "--out",
                format!("{} exists and is not empty; runs are never overwritten", dir.display()),
            ));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = resolve_config(&args.config)?;
    let dir = match &args.config.out {
        Some(d) => claim_dir(d)?,
        None => fresh_run_dir(&output_root(&cfg), &cfg)?,
    };
    eprintln!("run directory: {}", dir.display());
    let outcome = run_experiment(&cfg, &dir)?;
    for r in &outcome.reports {
        eprintln!(
            "round {:>3}  accuracy {:.4}  mean_util_kl {}",
            r.round,
            r.accuracy,
            r.utilization.mean.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
    }
    println!("{}", dir.display());
    Ok(())
}

fn exit_code(err: &Error) -> i32 {
    if err.is_config() {
        1
    } else {
        2
    }
}

/// Entry point shared by the binary and the tests. Returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => sweep::cmd_sweep(a),
        Command::Compare(a) => compare::cmd_compare(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
