use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{column}`")]
    MissingColumn { column: String },

    #[error("row {row}, column `{column}`: category {value} out of range")]
    OutOfRangeCategory { row: usize, column: String, value: i64 },

    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    NonNumericCell { row: usize, column: String, value: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Serialization(String),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("row {row}: every class likelihood underflows")]
    DegenerateRow { row: usize },

    #[error("class {class} has no posterior mass")]
    EmptyClass { class: usize },

    #[error("prior parameters diverged (norm {norm:.3e}); quasi-complete separation")]
    SeparationDetected { norm: f64 },

    #[error("dimension {dim} has zero spread")]
    DegenerateDimension { dim: usize },

    #[error("bandwidth matrix is not positive definite")]
    SingularBandwidth,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error("negative input {0} to scad")]
    NegativeInput(f64),

    #[error("linear system is singular")]
    SingularSystem,

    #[error("mse must be positive, got {0}")]
    NonPositiveMse(f64),

    #[error("quadrature did not converge (difference {diff:.3e})")]
    QuadratureNotConverged { diff: f64 },

    #[error("target shares cannot be realized (residual {residual:.3e})")]
    InfeasibleTarget { residual: f64 },

    #[error("no rows survive truncation")]
    EmptySelection,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("all {0} replications failed")]
    AllReplicationsFailed(usize),

    #[error("study aborted: {failed} of {total} replications failed")]
    StudyAborted { failed: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
