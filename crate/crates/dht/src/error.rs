use thiserror::Error;

#[derive(Debug, Error)]
pub enum DhtError {
    #[error("key {value} does not fit in {key_bits} bits")]
    KeyOutOfRange { value: u64, key_bits: u32 },

    #[error("invalid node configuration: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    /// Transport-level failure talking to a node's HTTP API.
    #[error("request to {uri} failed: {message}")]
    Http { uri: String, message: String },

    /// The node answered with an unexpected status.
    #[error("{uri} answered {status}: {body}")]
    Status {
        uri: String,
        status: u16,
        body: String,
    },

    #[error("instance {instance} could not be started: {message}")]
    Start { instance: String, message: String },

    #[error(transparent)]
    Harness(#[from] dwharness_core::Error),
}

impl DhtError {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        DhtError::Io {
            context: context.into(),
            source,
        }
    }
}
