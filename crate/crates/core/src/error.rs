use std::path::PathBuf;

use thiserror::Error;

use crate::kv::KvError;
use crate::vm::VmError;

/// Problems with a scenario description. The CLI maps these to exit code 3.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Failure of a whole run.
#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("memory model: {0}")]
    Vm(#[from] VmError),
    #[error("key-value store: {0}")]
    Kv(#[from] KvError),
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
