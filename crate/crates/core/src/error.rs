use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A scenario or input value violates its documented constraints.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Zero innovation variance on a channel whose measurement disagrees
    /// with the prediction.
    #[error("singular innovation on channel {channel}: residual {residual:e} with zero variance")]
    SingularInnovation { channel: usize, residual: f64 },

    #[error("gain synthesis failed at step {step}: {reason}")]
    Synthesis { step: usize, reason: String },

    #[error("series covers {available} steps but {required} are needed")]
    TraceTooShort { available: usize, required: usize },

    #[error("decay-rate fit failed: {0}")]
    Fit(String),

    #[error("episode {run} (seed {seed}) failed: {source}")]
    Episode {
        run: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad input rather than by a failure during
    /// stepping or synthesis.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config { .. } => true,
            Error::Episode { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
