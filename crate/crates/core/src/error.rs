use thiserror::Error;

pub type Result<T> = std::result::Result<T, SpatialError>;

#[derive(Debug, Error)]
pub enum SpatialError {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("insufficient distinct locations: need {needed}, found {found}")]
    InsufficientLocations { needed: usize, found: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("covariance not positive definite")]
    NotPositiveDefinite,

    #[error("invalid precision operator: 1'P1 = {0}")]
    InvalidPrecision(f64),

    #[error("degenerate split: denominator {0:e} at or below tolerance")]
    DegenerateSplit(f64),

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error("data error: {0}")]
    Data(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-numeric value {value:?} at row {row}, column `{column}`")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("unsupported archive format version {0}")]
    UnsupportedVersion(u64),

    #[error("archive fingerprint mismatch: {0}")]
    Fingerprint(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SpatialError {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        SpatialError::Parameter(msg.into())
    }
}
