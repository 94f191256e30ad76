//! Error type shared by every module.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("duplicate key: unit `{unit}`, time {time}")]
    DuplicateKey { unit: String, time: i64 },

    #[error("non-numeric value {value:?} in column `{column}` (line {line})")]
    NonNumeric {
        column: String,
        value: String,
        line: u64,
    },

    #[error("panel too short: no unit has at least two periods")]
    PanelTooShort,

    #[error("no differentiable pairs: no unit has two consecutive periods")]
    NoDifferentiablePairs,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate instrument variation{}", fold_suffix(*.fold))]
    DegenerateInstrument { fold: Option<usize> },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("rank deficient controls: {}", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("divergence: non-finite loss during training")]
    Divergence,

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{failed} of {total} replications failed (limit is 5%); first error: {first}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn fold_suffix(fold: Option<usize>) -> String {
    match fold {
        Some(k) => format!(" in fold {k}"),
        None => String::new(),
    }
}

impl Error {
    /// True for failures of the numerical procedures, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::DegenerateInstrument { .. }
            | Error::Singular(_)
            | Error::RankDeficient { .. }
            | Error::Divergence
            | Error::TooManyFailures { .. } => true,
            Error::Fold { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn in_fold(self, fold: usize) -> Error {
        match self {
            Error::DegenerateInstrument { fold: None } => {
                Error::DegenerateInstrument { fold: Some(fold) }
            }
            e @ Error::Fold { .. } => e,
            e => Error::Fold {
                fold,
                source: Box::new(e),
            },
        }
    }
}
