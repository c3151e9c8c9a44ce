use thiserror::Error;

/// Errors raised across the crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("location index {index} outside grid with {cells} cells")]
    LocationOutOfRange { index: usize, cells: usize },

    #[error("cannot draw {requested} locations without replacement from {available} cells")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("invalid degrees of freedom {df}: {reason}")]
    InvalidDf { df: usize, reason: String },

    #[error("degenerate locations: {0}")]
    DegenerateLocations(String),

    #[error("matrix is rank deficient (rank {rank} of {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("field side {0} is not a power of two")]
    NotDyadic(usize),

    #[error("wavelet level {level} out of range for {levels} levels")]
    LevelOutOfRange { level: usize, levels: usize },

    #[error("unsupported wavelet family with {0} vanishing moments (expected 1..=10)")]
    UnsupportedFamily(usize),

    #[error("frequency index ({p}, {q}) outside {m}x{n} spectrum")]
    FrequencyOutOfRange { p: usize, q: usize, m: usize, n: usize },

    #[error("insufficient points for local regression: {found} available, {required} required")]
    InsufficientPoints { found: usize, required: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("path error: {0}")]
    Path(String),

    #[error("target bias {target} unreachable; attainable range is ({lo}, {hi})")]
    Unreachable { target: f64, lo: f64, hi: f64 },

    #[error("eigen-solver did not converge after expanding to {0} Krylov vectors")]
    NoConvergence(usize),

    #[error("replication {rep} failed: {source}")]
    Replication {
        rep: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
