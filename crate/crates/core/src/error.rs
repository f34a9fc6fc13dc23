use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    InvalidShape(Vec<usize>),
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unsupported kernel size {0}: must be odd")]
    EvenKernel(usize),
    #[error("op `{0}` has no registered gradient rule")]
    UnregisteredOp(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("layer `{0}` not found")]
    LayerNotFound(String),
    #[error("layer `{0}` is not an involution layer")]
    NotInvolution(String),
    #[error("unsupported depth {0}; expected one of 26, 38, 50, 101, 152")]
    UnsupportedDepth(usize),
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
