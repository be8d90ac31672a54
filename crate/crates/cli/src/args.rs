use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use tablequake::error::Error;
use tablequake::perturb::PerturbationKind;

use crate::{EXIT_IO, EXIT_VALIDATION};

#[derive(Debug, Parser)]
#[command(
    name = "tablequake",
    version,
    about = "Robustness evaluation harness for tabular question answering"
)]
pub struct Cli {
    /// JSON object whose keys supply any flag not given on the command line
    #[arg(long, global = true, value_name = "FILE")]
    pub flags: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Apply structural and value perturbations to an instance file
    Perturb {
        #[arg(long = "in")]
        input: PathBuf,
        /// Comma-separated: row,col,transpose,trow,tcol,dvp,rvp,nvp,nt
        #[arg(long, value_delimiter = ',', value_parser = parse_kind, required = true)]
        kinds: Vec<PerturbationKind>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep tables with strictly fewer cells than this (header included)
        #[arg(long, default_value_t = 150)]
        cap: usize,
        /// Keep only instances whose table contains a gold answer verbatim
        #[arg(long)]
        require_answer: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render prompts for a perturbed dataset
    Prompt {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=3))]
        shots: u8,
        /// `default` or a template file with {instructions} {exemplars} {table} {question}
        #[arg(long, default_value = "default")]
        template: String,
        /// JSON-lines exemplars (instance fields plus `answer`)
        #[arg(long)]
        exemplars: Option<PathBuf>,
        #[arg(long, default_value_t = 150)]
        cap: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score run records and write scored.csv and summary tables
    Score {
        #[arg(long)]
        orig: PathBuf,
        #[arg(long)]
        pert: PathBuf,
        /// Perturbed dataset the runs were produced from
        #[arg(long)]
        dataset: PathBuf,
        /// Score DVP/RVP against the original gold answers
        #[arg(long)]
        score_against_original: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute per-head entropy deltas from attention traces
    Attn {
        #[arg(long)]
        orig_traces: PathBuf,
        #[arg(long)]
        pert_traces: PathBuf,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        normalize_entropy: bool,
        #[arg(long, value_enum, default_value_t = Positions::Prompt)]
        positions: Positions,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correlate entropy deltas with EM differences; emit heatmaps
    Correlate {
        #[arg(long)]
        grids: PathBuf,
        /// scored.csv from `score` (default: <out>/scored.csv)
        #[arg(long)]
        scored: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Table-size bin report
    Report {
        /// Directory holding scored.csv, or the file itself
        #[arg(long)]
        scored: PathBuf,
        /// Instance or perturbed-dataset file giving table sizes
        #[arg(long)]
        instances: PathBuf,
        /// `default` or comma-separated edges, e.g. 0,50,100,150
        #[arg(long, default_value = "default")]
        bins: String,
        #[arg(long, default_value_t = 150)]
        cap: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole pipeline offline with the mock model
    Simulate {
        /// Mock model configuration (JSON)
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 150)]
        cap: usize,
        #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=3))]
        shots: u8,
        #[arg(long)]
        exemplars: Option<PathBuf>,
        #[arg(long)]
        score_against_original: bool,
        #[arg(long)]
        normalize_entropy: bool,
        #[arg(long, default_value = "default")]
        bins: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Positions {
    Prompt,
    All,
}

fn parse_kind(s: &str) -> Result<PerturbationKind, String> {
    let kind: PerturbationKind = s.parse().map_err(|e| format!("{e}"))?;
    if kind == PerturbationKind::Original {
        return Err("\"original\" is always produced and cannot be requested".into());
    }
    Ok(kind)
}

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Io(String),
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_io() => EXIT_IO,
            CliError::Io(_) => EXIT_IO,
            _ => EXIT_VALIDATION,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(m) | CliError::Validation(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

/// Appends `--key value` for every entry of the `--flags` JSON file that is
/// not already on the command line. Booleans become bare switches.
pub fn expand_flags_file(mut argv: Vec<String>) -> Result<Vec<String>, CliError> {
    let Some(pos) = argv
        .iter()
        .position(|a| a == "--flags" || a.starts_with("--flags="))
    else {
        return Ok(argv);
    };
    let path = match argv[pos].strip_prefix("--flags=") {
        Some(p) => p.to_owned(),
        None => argv
            .get(pos + 1)
            .cloned()
            .ok_or_else(|| CliError::Validation("--flags needs a file".into()))?,
    };
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{path}: {e}")))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{path}: {e}")))?;
    let serde_json::Value::Object(map) = value else {
        return Err(CliError::Validation(format!("{path}: expected a JSON object")));
    };
    for (key, value) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        let present = argv
            .iter()
            .any(|a| a == &flag || a.starts_with(&format!("{flag}=")));
        if present {
            continue;
        }
        match value {
            serde_json::Value::Bool(true) => argv.push(flag),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::String(s) => argv.extend([flag, s]),
            serde_json::Value::Number(n) => argv.extend([flag, n.to_string()]),
            serde_json::Value::Array(items) => {
                let joined: Vec<String> = items
                    .iter()
                    .map(|v| v.as_str().map(str::to_owned).unwrap_or_else(|| v.to_string()))
                    .collect();
                argv.extend([flag, joined.join(",")]);
            }
            serde_json::Value::Object(_) => {
                return Err(CliError::Validation(format!(
                    "{path}: flag {key:?} cannot be an object"
                )));
            }
        }
    }
    Ok(argv)
}
