use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// Variants are grouped so front ends can map them to exit codes: see
/// [`Error::is_numerical`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-SPD prior: {0}")]
    NonSpdPrior(String),

    #[error("inclusion probability out of range at ({i}, {k}): {value}")]
    InclusionOutOfRange { i: usize, k: usize, value: f64 },

    #[error("invalid hyperparameter: {0}")]
    Hyperparameter(String),

    #[error("availability mask is not binary at ({i}, {t}): {value}")]
    MaskNotBinary { i: usize, t: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot extract {r} components from {n} variables")]
    TooFewVariables { n: usize, r: usize },

    #[error("non-finite value in {stage} at index {index}")]
    NonFinite { stage: &'static str, index: usize },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("non-positive residual scale for {what} {index}: {value}")]
    NonPositiveScale {
        what: &'static str,
        index: usize,
        value: f64,
    },

    #[error("ELBO decreased at sweep {sweep}: {previous} -> {current}")]
    ElboDecrease {
        sweep: usize,
        previous: f64,
        current: f64,
        state: Box<crate::types::VariationalState>,
    },

    #[error("factor alignment undefined: estimated factor {0} has zero variance")]
    ZeroVarianceFactor(usize),

    #[error("estimated factor matrix is rank deficient")]
    RankDeficient,

    #[error("variable {0} has zero standard deviation")]
    ConstantVariable(usize),

    #[error("csv parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("unsupported state file: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// True for failures of the numerical machinery (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::NotPositiveDefinite(_)
                | Error::NonPositiveScale { .. }
                | Error::ElboDecrease { .. }
                | Error::ZeroVarianceFactor(_)
                | Error::RankDeficient
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
