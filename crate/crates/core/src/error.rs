use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty-signal")]
    EmptySignal,

    #[error("spectrum has {got} bins, expected {expected} for length {len}")]
    BinCount { expected: usize, got: usize, len: usize },

    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("backward called before forward: {0}")]
    BackwardBeforeForward(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("zero-energy kernel")]
    ZeroEnergyKernel,

    #[error("PSD not normalized (sum = {0})")]
    Unnormalized(f64),

    #[error("degenerate class: {0}")]
    DegenerateClass(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for divergence-type failures (non-finite losses, gradients or state).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Diverged(_) | Error::NonFinite { .. })
    }
}
