use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite input to {0}")]
    NonFiniteInput(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("skeleton graph is disconnected: joint {0} unreachable from the root")]
    DisconnectedGraph(usize),
    #[error("joint index {index} out of range for {num_joints} joints")]
    IndexOutOfRange { index: usize, num_joints: usize },
    #[error("self-loop on joint {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),

    #[error("sigma must be strictly positive (found {0})")]
    NonPositiveSigma(f64),
    #[error("point has non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("schema violation at line {line}: {msg}")]
    SchemaViolation { line: usize, msg: String },
    #[error("expected {expected} joints, record has {found}")]
    JointCountMismatch { expected: usize, found: usize },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
