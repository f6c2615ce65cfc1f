use alloc::string::String;

/// Errors raised by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: String, detail: String },
    #[error("backward already called on this recording")]
    BackwardTwice,
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("item {0} appears under more than one SID")]
    DuplicateItem(u64),
    #[error("token {0} outside vocabulary")]
    UnknownToken(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn shape(context: &str, detail: String) -> Self {
        Error::Shape { context: context.into(), detail }
    }

    /// Re-labels a shape error with the layer that raised it.
    pub fn in_layer(self, layer: &str) -> Self {
        match self {
            Error::Shape { context, detail } => Error::Shape {
                context: alloc::format!("layer `{layer}` ({context})"),
                detail,
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
