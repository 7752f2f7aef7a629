use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },

    /// The command could not be started at all (missing binary, bad cwd).
    #[error("environment {env}: failed to spawn `{program}`: {source}")]
    Spawn {
        env: String,
        program: String,
        #[source]
        source: io::Error,
    },

    /// A remote transfer or shell invocation failed; carries the host.
    #[error("host {host}: {message}")]
    Remote { host: String, message: String },

    #[error("could not create environment on {host}: {message}")]
    EnvironmentCreation { host: String, message: String },

    #[error("path `{path}` escapes the environment root")]
    PathEscape { path: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("interrupted while waiting for `{0}`")]
    Interrupted(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("configuration error in `{field}`: {message}")]
    ConfigField { field: String, message: String },

    #[error("could not parse {path} at line {line}, column {column}: {message}")]
    ConfigParse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("prepare failed on environment {env_id}: {source}")]
    Prepare {
        env_id: usize,
        /// Environments that finished preparing before the abort.
        prepared: Vec<usize>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for configuration and usage problems (as opposed to test failures).
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::ConfigField { .. } | Error::ConfigParse { .. }
        )
    }
}

pub(crate) trait IoContext<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| Error::io(context(), e))
    }
}
