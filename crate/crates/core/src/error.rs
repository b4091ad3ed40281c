use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("duplicate cell (od {od}, day {day}, interval {interval})")]
    DuplicateCell { od: usize, day: usize, interval: usize },
    #[error("missing cell (od {od}, day {day}, interval {interval})")]
    MissingCell { od: usize, day: usize, interval: usize },
    #[error("interval {interval} has insufficient history (need at least {required})")]
    InsufficientHistory { interval: usize, required: usize },
    #[error("insufficient donors: {available} available, {required} required")]
    InsufficientDonors { available: usize, required: usize },
    #[error("unknown station `{0}`")]
    UnknownStation(String),
    #[error("station `{from}` cannot reach the target set")]
    Unreachable { from: String },
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },
    #[error("design matrix is singular")]
    SingularDesign,
    #[error("operation unsupported for {0} models")]
    UnsupportedKind(&'static str),
    #[error("training set is empty after filtering")]
    EmptyTrainingSet,
    #[error("no rows eligible for evaluation")]
    EmptyEvaluation,
    #[error("threshold denominator is degenerate ({0:e})")]
    DegenerateThreshold(f64),
    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
