use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("token id {id} is out of vocabulary (size {vocab})")]
    OutOfVocab { id: usize, vocab: usize },
    #[error("label {label} is out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not connected to any tensor that requires grad")]
    Disconnected,
    #[error("config error: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("learning-rate schedule is 1-indexed; step 0 is invalid")]
    ZeroStep,
    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGrad(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("parse error: {0}")]
    Parse(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("tensor `{name}`: checkpoint shape {found:?} does not match model shape {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("freeze pattern `{0}` matches no parameter")]
    FreezeNoMatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
