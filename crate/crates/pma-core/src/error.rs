use thiserror::Error;

/// Crate-wide error type. Variants are grouped by the layer that raises them;
/// the CLI maps `Config` → exit 2, `Data`/`Format`/`Io` → exit 3 and
/// `NonFinite` → exit 4.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("backward already consumed this graph; rebuild the graph before differentiating again")]
    DoubleBackward,
    #[error("program is not deterministic: repeated forward produced a different value")]
    NonDeterministicProgram,
    #[error("decision replay mismatch: {0}")]
    DecisionReplay(String),
    #[error("shared parameters mutated mid-forward: {0}")]
    SharedParamsMutated(String),
    #[error("non-finite value produced in {0}")]
    NonFinite(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("feature file error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
