use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent model or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset contents do not satisfy a precondition.
    #[error("data error: {0}")]
    Data(String),

    /// A malformed binary input file.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// A non-finite value appeared during training.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Broken internal invariant (template mismatch and similar).
    #[error("internal error: {0}")]
    Internal(String),

    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn for_client(self, client: usize) -> Self {
        Error::Client { client, source: Box::new(self) }
    }

    pub fn in_round(self, round: usize) -> Self {
        Error::Round { round, source: Box::new(self) }
    }

    /// True when the root cause is a non-finite value.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Numeric(_) => true,
            Error::Client { source, .. } | Error::Round { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
