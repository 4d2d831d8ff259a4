use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("malformed input: {0}")]
    Parse(String),

    // panel
    #[error("missing value at row {row}, column {col}")]
    MissingValue { row: usize, col: usize },
    #[error("duplicate unit id `{0}`")]
    DuplicateUnitId(String),
    #[error("treated id `{0}` does not match any unit")]
    UnknownTreatedId(String),
    #[error("t0 = {t0} is outside [1, {max}]")]
    BadT0 { t0: usize, max: usize },
    #[error("covariate rows do not match the panel: {0}")]
    RowMismatch(String),
    #[error("invalid panel: {0}")]
    InvalidPanel(String),

    // matching
    #[error("donor set is empty")]
    EmptyDonorSet,
    #[error("unknown unit id `{0}`")]
    UnknownUnitId(String),
    #[error("unit `{0}` is treated and cannot be excluded from the donor pool")]
    ExcludedIsTreated(String),
    #[error("subsample fraction {0} must lie in (0, 1]")]
    BadFraction(f64),
    #[error("empty group `{0}`")]
    EmptyGroup(String),

    // regress
    #[error("need {needed} donors, only {available} available")]
    TooFewDonors { needed: usize, available: usize },
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    // tuning
    #[error("actual values have zero norm")]
    ZeroActualNorm,
    #[error("insufficient columns: {0}")]
    InsufficientColumns(String),
    #[error("every candidate model failed; last error: {0}")]
    AllCandidatesFailed(String),

    // effects
    #[error("need at least 2 units for inference, got {0}")]
    TooFewUnits(usize),
    #[error("insufficient donors for placebo draws: need {needed}, have {available}")]
    InsufficientDonors { needed: usize, available: usize },
    #[error("sample split produced an empty side")]
    EmptySplit,

    // validation
    #[error("control group is empty")]
    EmptyControl,
    #[error("invalid simulation config: {0}")]
    ConfigInvalid(String),
}
