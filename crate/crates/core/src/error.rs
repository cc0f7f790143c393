use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("column {0} has zero variance")]
    ConstantColumn(usize),

    #[error("input contains a non-finite value")]
    NonFinite,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("degenerate Beta prior: p + a0 + b0 - 2 must be positive")]
    DegeneratePrior,

    #[error("linear system could not be solved (relative residual {residual:e})")]
    SingularSystem { residual: f64 },

    #[error("design matrix has no non-zero eigenvalue")]
    AllZeroSpectrum,

    #[error("cannot split {n} samples into {folds} folds")]
    TooFewSamples { n: usize, folds: usize },

    #[error("OLS model error is zero for replicate {0}")]
    ZeroOlsError(usize),

    #[error("solver logits deviate from the closed form by {max_abs_diff:e}")]
    MismatchBeyondTolerance { max_abs_diff: f64 },

    #[error("every grid point failed during cross-validation")]
    NoValidGridPoint,

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
