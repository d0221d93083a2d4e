//! Library surface of the experiment runner, shared by the `air` binary and
//! the integration tests: configuration schemas, run commands, and the model
//! parameter file format.

pub mod commands;
pub mod config;
pub mod csvio;
pub mod model_file;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Divergence(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Divergence(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }
}
