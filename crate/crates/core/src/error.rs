use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no patches")]
    NoPatches,

    #[error("not a tensor file")]
    NotTensorFile,

    #[error("not a checkpoint file")]
    NotCheckpoint,

    #[error("truncated: {0}")]
    Truncated(&'static str),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("missing tensor `{0}` in checkpoint")]
    MissingTensor(String),

    #[error("infeasible dataset spec: {0}")]
    Infeasible(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at iteration {iter}: loss is {loss}")]
    Diverged { iter: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err<S: Into<String>>(msg: S) -> Error {
    Error::Shape(msg.into())
}
