use thiserror::Error;

/// Errors raised by model handling, operator construction, and estimation.
#[derive(Debug, Error)]
pub enum MdmError {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("window [{start}, {end}] outside horizon 0..={horizon}")]
    HorizonOverrun {
        start: isize,
        end: isize,
        horizon: usize,
    },

    #[error("{what} is rank deficient at k={k}: rank {rank}, expected {expected}")]
    RankDeficient {
        what: &'static str,
        k: usize,
        rank: usize,
        expected: usize,
    },

    #[error("{what} is not identifiable: design rank {rank} < {expected} unknowns")]
    NotIdentifiable {
        what: &'static str,
        rank: usize,
        expected: usize,
    },

    #[error("{what} is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd {
        what: &'static str,
        min_eigenvalue: f64,
    },

    #[error("{0} is not symmetric")]
    NotSymmetric(&'static str),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("weighting matrix could not be factorized: {0}")]
    SingularWeighting(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("MC run {run} failed in {module}: {source}")]
    Run {
        run: usize,
        module: &'static str,
        #[source]
        source: Box<MdmError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl MdmError {
    /// Name of the module a failure originates from, used in CLI diagnostics.
    pub fn module(&self) -> &'static str {
        match self {
            MdmError::InvalidModel(_) => "model",
            MdmError::HorizonOverrun { .. } | MdmError::RankDeficient { .. } => "stack_ops",
            MdmError::NotIdentifiable { .. }
            | MdmError::SingularWeighting(_)
            | MdmError::InsufficientData(_) => "estimators",
            MdmError::NotPsd { .. } | MdmError::NotSymmetric(_) => "model",
            MdmError::Dimension(_) => "linalg",
            MdmError::Config(_) | MdmError::Io(_) | MdmError::Csv(_) => "harness",
            MdmError::Run { module, .. } => module,
        }
    }

    /// Time index carried by the error, if any.
    pub fn time_index(&self) -> Option<usize> {
        match self {
            MdmError::RankDeficient { k, .. } => Some(*k),
            MdmError::HorizonOverrun { start, .. } => usize::try_from(*start).ok(),
            MdmError::Run { source, .. } => source.time_index(),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, MdmError>;
