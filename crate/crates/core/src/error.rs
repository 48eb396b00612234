use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed input: {0}")]
    MalformedInput(String),

    #[error("unsupported channel count {got} (expected {expected})")]
    BadChannelCount { expected: &'static str, got: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("image too small: {got} pixels, minimum is {min}")]
    TooSmall { min: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("pixel ({row}, {col}) in the periphery is not covered by any pooling region")]
    UncoveredPixel { row: usize, col: usize },

    #[error("pooling region {region} has total weight {weight:e} at pyramid level {level}")]
    DegenerateRegion { region: usize, level: usize, weight: f64 },

    #[error("statistic schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("non-finite loss at iteration {iteration}: region {region}, statistic {statistic} ({value})")]
    NonFiniteLoss {
        iteration: usize,
        region: usize,
        statistic: String,
        value: f64,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training diverged at epoch {epoch}: loss {loss:e} exceeds 10x initial loss {initial:e}")]
    DivergedLoss { epoch: usize, loss: f64, initial: f64 },

    #[error("bad checkpoint magic")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),

    #[error("checkpoint payload has {got} bytes, architecture requires {expected}")]
    PayloadSizeMismatch { expected: usize, got: usize },

    #[error("fovea disk contains no pixels")]
    EmptyFovea,

    #[error("report aggregates do not match records: {0}")]
    InconsistentReport(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
