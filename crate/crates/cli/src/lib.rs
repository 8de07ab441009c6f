//! The `cbm-align` command line: one JSON config, one output directory,
//! seven subcommands.
//!
//! Every successful run leaves `run_manifest.json` listing its outputs and
//! `timing.json` with wall-clock seconds. A failed run prints
//! `{"error": {"kind", "message"}}` to stderr, writes the same object to
//! `error.json` in the output directory and exits nonzero.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod sweep;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, ValueEnum};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::{Outputs, ERROR_FILE, TIMING};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Generate a synthetic bundle with planted concepts.
    Synth,
    /// Write raw and enhanced concept score matrices.
    Score,
    /// Train the projection and the class head.
    Train,
    /// Classification, concept and distributional metrics.
    Eval,
    /// Error matrix and confounding class pairs.
    Analyze,
    /// Add concepts for confounding pairs and retrain the head.
    Intervene,
    /// Concept accuracy against the number of labels per class.
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Score => "score",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Analyze => "analyze",
            Command::Intervene => "intervene",
            Command::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cbm-align", version, about)]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// JSON run configuration; omitted sections take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version; a closed pipe is not an error
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string().trim_end().to_string());
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            let _ = writeln!(std::io::stdout(), "{summary}");
            0
        }
        Err(err) => {
            let body = err.to_json();
            eprintln!("{body}");
            write_error(&cli.out, &body);
            err.exit_code()
        }
    }
}

fn write_error(out: &Path, body: &serde_json::Value) {
    if cbm_align::io::ensure_dir(out).is_ok() {
        // best effort: the stderr copy is authoritative
        let _ = cbm_align::io::write_json(&out.join(ERROR_FILE), body);
    }
}

pub fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one subcommand and returns the one-line JSON summary.
pub fn execute(cli: &Cli) -> CliResult<serde_json::Value> {
    let cfg = load_config(cli.config.as_deref())?;
    let mut out = Outputs::create(&cli.out)?;
    let started = Instant::now();
    let name = cli.command.name();
    let mut timing = serde_json::Map::new();
    match cli.command {
        Command::Synth => commands::synth(&cfg, &mut out)?,
        Command::Score => commands::score(&cfg, &mut out)?,
        Command::Train => {
            let secs = commands::train_cmd(&cfg, &mut out)?;
            timing.insert("train_secs".into(), json!(secs));
        }
        Command::Eval => commands::eval(&cfg, &mut out)?,
        Command::Analyze => commands::analyze(&cfg, &mut out)?,
        Command::Intervene => commands::intervene(&cfg, &mut out)?,
        Command::Sweep => sweep::sweep(&cfg, &mut out)?,
    }
    timing.insert("total_secs".into(), json!(started.elapsed().as_secs_f64()));
    out.json(TIMING, &timing)?;
    let outputs = out.finish(json!({
        "tool": "cbm-align",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": name,
        "seed": commands::primary_seed(&cfg, name),
        "config": cfg,
    }))?;
    Ok(json!({
        "status": "ok",
        "subcommand": name,
        "out": cli.out,
        "n_outputs": outputs.len(),
    }))
}
