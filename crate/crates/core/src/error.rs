use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation precondition (wrong length, bad shape...).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{name} out of range: {value}")]
    Range { name: &'static str, value: f64 },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    Shape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("checksum mismatch: stored {stored:#05b}, computed {computed:#05b}")]
    ChecksumMismatch { stored: u8, computed: u8 },
    #[error("fit did not converge after {iterations} iterations")]
    FitFailed {
        iterations: usize,
        /// Best parameter vector reached before giving up.
        best: Vec<f64>,
    },
    #[error("underdetermined: {0}")]
    Underdetermined(String),
    #[error("no consensus: {0}")]
    NoConsensus(String),
    #[error("degenerate background at index {index}: {value}")]
    DegenerateBackground { index: usize, value: f64 },
    #[error("transition frequencies not ordered A >= B >= C >= D")]
    LabelOrder,
    #[error("ground splitting {gs_ghz} GHz exceeds excited splitting {es_ghz} GHz")]
    OrderingInfeasible { gs_ghz: f64, es_ghz: f64 },
    #[error("model mismatch: need {needed} peaks, found {found}")]
    ModelMismatch { needed: usize, found: usize },
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    #[error("autofocus failed: no checksum-valid fiducial at any focus position")]
    FocusFailure,
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
