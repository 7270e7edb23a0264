//! Experiment runner behind the `meanfield` binary: TOML configs in, CSV and JSON
//! artifacts out.

pub mod catalog;
pub mod config;
pub mod experiments;
pub mod output;

use std::fmt;

use meanfield_core::Error;

pub use config::{ExperimentConfig, Kind};
pub use experiments::{run_experiment, Artifacts};

#[derive(Debug)]
pub enum CliError {
    /// Config does not parse or violates an invariant.
    Config(String),
    /// A core operation failed; `building` marks failures while constructing model objects.
    Core { op: &'static str, err: Error, building: bool },
    /// A run finished but a configured tolerance was exceeded.
    Tolerance(String),
    Io(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn build(err: Error) -> Self {
        CliError::Core {
            op: "config::build",
            err,
            building: true,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core { err, building, .. } => {
                if err.is_overflow() {
                    4
                } else if matches!(err, Error::Io(_) | Error::Csv(_)) {
                    1
                } else if !building && err.is_numerical() {
                    3
                } else {
                    2
                }
            }
            CliError::Tolerance(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid config: {m}"),
            CliError::Core { op, err, .. } => write!(f, "{op}: {err}"),
            CliError::Tolerance(m) => write!(f, "tolerance exceeded: {m}"),
            CliError::Io(m) => write!(f, "i/o: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Maps a core error raised by operation `op` during a run.
pub fn at(op: &'static str) -> impl FnOnce(Error) -> CliError {
    move |err| CliError::Core {
        op,
        err,
        building: false,
    }
}

/// A bundled config name or a path to a TOML file.
pub fn load(arg: &str) -> Result<ExperimentConfig, CliError> {
    if let Some(text) = catalog::lookup(arg) {
        return ExperimentConfig::parse(text);
    }
    let text = std::fs::read_to_string(arg).map_err(|e| {
        CliError::Config(format!("{arg:?} is neither a bundled experiment nor a readable file ({e})"))
    })?;
    ExperimentConfig::parse(&text)
}
