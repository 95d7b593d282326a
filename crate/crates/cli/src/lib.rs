//! Command-line runs over `sfe-core`: configuration, inputs, artifacts and
//! manifests.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod inputs;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::artifacts::{input_records, sha256_file, Artifacts, InputRecord, Manifest};
use crate::config::{Command, RunConfig};
use crate::inputs::InputFiles;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("{0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Core(#[from] sfe_core::Error),
}

impl CliError {
    /// 2 for non-convergence, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(sfe_core::Error::NotConverged(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sfe", version, about = "Schrödinger systems, h-path bridges and moment measures on grids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Solve a Schrödinger system for a kernel and two marginals.
    Solve(RunArgs),
    /// Entropic control value between two densities.
    Control(RunArgs),
    /// Simulate h-path bridges and check their endpoint laws.
    Bridge(RunArgs),
    /// Convex potential with a prescribed moment measure.
    Moment(RunArgs),
    /// Convergence ladders under perturbed kernels or marginals.
    Stability(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// `d,r,n`: dimension, radius, points per axis.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub full_paths: bool,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl RunArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>, CliError> {
        let mut out = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Invalid(format!("--set expects KEY=VALUE, found {s:?}")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(v) = self.seed {
            out.push(("seed".into(), v.to_string()));
        }
        if let Some(v) = self.eps {
            out.push(("eps".into(), v.to_string()));
        }
        if let Some(v) = self.tol {
            out.push(("tol".into(), v.to_string()));
        }
        if let Some(v) = &self.grid {
            out.push(("grid".into(), v.clone()));
        }
        if self.full_paths {
            out.push(("full_paths".into(), "true".into()));
        }
        Ok(out)
    }
}

impl Sub {
    fn split(&self) -> (Command, &RunArgs) {
        match self {
            Sub::Solve(a) => (Command::Solve, a),
            Sub::Control(a) => (Command::Control, a),
            Sub::Bridge(a) => (Command::Bridge, a),
            Sub::Moment(a) => (Command::Moment, a),
            Sub::Stability(a) => (Command::Stability, a),
        }
    }
}

/// Runs one command and writes its artifacts and manifest. Returns the exit
/// status: 0 on success, 2 when a solve did not converge.
pub fn run(cli: &Cli) -> Result<u8, CliError> {
    let start = Instant::now();
    let (command, args) = cli.command.split();
    let cfg = RunConfig::load(command, args.config.as_deref(), &args.overrides()?)?;
    let mut out = Artifacts::create(&args.out)?;
    let mut files = InputFiles::default();
    let converged = commands::dispatch(&cfg, &mut out, &mut files)?;
    let mut inputs = input_records(&files)?;
    if let Some(p) = &args.config {
        inputs.insert(
            "config".into(),
            InputRecord {
                path: p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
                sha256: sha256_file(p)?,
            },
        );
    }
    let manifest = Manifest {
        tool: "sfe",
        version: env!("CARGO_PKG_VERSION"),
        command: command.name(),
        inputs,
        parameters: cfg.entries().clone(),
        artifacts: out.names().to_vec(),
        converged,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    out.write_json("manifest.json", &manifest)?;
    Ok(if converged { 0 } else { 2 })
}
