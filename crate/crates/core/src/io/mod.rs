//! File formats shared by the simulator, pipeline and command line.

mod config;
mod trajectory;

pub use config::{take_camera, ConfigFile, ConfigValue};
pub use trajectory::{read_trajectory, read_trajectory_file, write_trajectory, write_trajectory_file, TrajectoryEntry};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IoError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown configuration key '{key}' (line {line})")]
    UnknownKey { key: String, line: usize },
    #[error("configuration key '{key}': {msg}")]
    BadValue { key: String, msg: String },
}

impl From<std::io::Error> for IoError {
    fn from(e: std::io::Error) -> Self {
        IoError::Io(e.to_string())
    }
}
