use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Matrix shapes do not line up for the requested operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid input: {0}")]
    Input(String),

    /// A topology could not be built for the requested size.
    #[error("topology construction: {0}")]
    Topology(String),

    /// A mixing matrix failed the doubly stochastic / symmetry checks.
    #[error("mixing matrix validation: {0}")]
    Validation(String),

    #[error("config: {0}")]
    Config(String),

    /// A mathematical guarantee was observed to fail at runtime.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse: {0}")]
    Parse(String),

    /// Training produced non-finite or exploding values.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag for the variant.
    pub fn category(&self) -> &'static str {
        match self {
            Self::Shape { .. } => "shape",
            Self::Input(_) => "input",
            Self::Topology(_) => "topology",
            Self::Validation(_) => "validation",
            Self::Config(_) => "config",
            Self::Contract(_) => "contract",
            Self::Parse(_) => "parse",
            Self::Diverged(_) => "diverged",
            Self::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
