use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid system: {0}")]
    InvalidSystem(String),

    #[error("trial length must be at least one sample")]
    EmptyTrial,

    #[error("closed loop is not asymptotically stable (pole magnitudes {pole_magnitudes:?})")]
    Unstable { pole_magnitudes: Vec<f64> },

    #[error("closed loop has an algebraic loop (1 + G(0)C(0) = 0)")]
    AlgebraicLoop,

    #[error("position {position:?} lies outside the plant domain [{min:?}, {max:?}]")]
    OutOfDomain {
        position: Vec<f64>,
        min: Vec<f64>,
        max: Vec<f64>,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("infeasible trajectory: {0}")]
    Infeasible(String),

    #[error("unknown basis kind `{0}`")]
    UnknownBasis(String),

    #[error(
        "update law is singular (condition estimate {condition:.3e}); the basis is rank deficient, increase w_f to regularize"
    )]
    SingularUpdate { condition: f64 },

    #[error("covariance matrix could not be factorized (condition estimate {condition:.3e}): {context}")]
    Conditioning { condition: f64, context: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("at position {position:?}: {source}")]
    AtPosition {
        position: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at(self, position: &[f64]) -> Self {
        Error::AtPosition {
            position: position.to_vec(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with position annotations stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtPosition { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_stability(&self) -> bool {
        matches!(self.root(), Error::Unstable { .. } | Error::AlgebraicLoop)
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::SingularUpdate { .. } | Error::Conditioning { .. } | Error::Infeasible(_)
        )
    }
}
