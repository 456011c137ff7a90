use thiserror::Error;

use crate::balance::BalanceWeights;
use crate::pal::PalFit;

pub type Result<T> = std::result::Result<T, Error>;

/// Which block of a [`Dataset`](crate::data::Dataset) a column index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Covariates,
    Treatments,
}

impl std::fmt::Display for Block {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Block::Covariates => f.write_str("covariate"),
            Block::Treatments => f.write_str("treatment"),
        }
    }
}

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{block} column {index} has zero variance")]
    ConstantColumn { block: Block, index: usize },

    #[error("column `{0}` not found")]
    MissingColumn(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("treatment correlation matrix is singular (condition number {condition:.3e})")]
    SingularTreatmentCorrelation { condition: f64 },

    #[error("residual products have zero variance")]
    ZeroResidualVariance,

    #[error("every |GCM| value is zero; prior weights are undefined")]
    AllZeroGcm,

    #[error("prior adaptive lasso did not converge in {max_iters} iterations")]
    PalNonConvergence { max_iters: usize, fit: Box<PalFit> },

    #[error("no grid point produced a usable fit: {0}")]
    NoUsableFit(String),

    #[error("entropy balancing did not converge (gradient norm {grad_norm:.3e})")]
    BalanceNonConvergence {
        grad_norm: f64,
        best: Box<BalanceWeights>,
    },

    #[error("design matrix is rank deficient")]
    RankDeficientDesign,

    #[error("spline knots fall outside the observed treatment range")]
    KnotsOutsideRange,

    #[error("{failed} of {total} replicates failed")]
    TooManyFailures { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) => ErrorClass::Config,
            Error::ConstantColumn { .. }
            | Error::MissingColumn(_)
            | Error::Parse { .. }
            | Error::InvalidData(_)
            | Error::Io(_)
            | Error::Json(_) => ErrorClass::Data,
            _ => ErrorClass::Numerical,
        }
    }
}
