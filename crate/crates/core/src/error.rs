use thiserror::Error;

/// Errors surfaced by the modelling and data-preparation layers.
///
/// Variants carry enough context to be actionable from a pipeline log;
/// callers that need structured output serialize the `Display` form.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("calendar: {0}")]
    Calendar(String),

    #[error("geometry: {0}")]
    Geometry(String),

    #[error("station selection left no stations (rule: {rule})")]
    EmptySelection { rule: String },

    #[error("station {station}, year {year}: {observed} observed days, need at least {needed} to impute")]
    TooSparseToImpute {
        station: String,
        year: i32,
        observed: usize,
        needed: usize,
    },

    #[error("incomplete hourly coverage: {0}")]
    IncompleteHours(String),

    #[error("{context}: series length {got} does not match calendar length {want}")]
    LengthMismatch {
        context: String,
        got: usize,
        want: usize,
    },

    #[error("municipality {id} overlaps no grid cell")]
    NoCellOverlap { id: String },

    #[error("reanalysis cells {a} and {b} overlap with positive area")]
    CellsOverlap { a: String, b: String },

    #[error("covariance matrix not positive definite after jitter ({context})")]
    NotPositiveDefinite { context: String },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("{context}: dense solve of dimension {dim} exceeds configured cap {cap}")]
    SolveTooLarge {
        context: String,
        dim: usize,
        cap: usize,
    },

    #[error("optimizer failed to converge in {context} after {iters} iterations (grad norm {grad_norm:.3e})")]
    NoConvergence {
        context: String,
        iters: usize,
        grad_norm: f64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("exposure lookup failed: {0}")]
    MissingExposure(String),

    #[error("unsupported input: {0}")]
    Unsupported(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
