use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    /// The Fisher information matrix cannot be inverted; the parameters are
    /// not jointly identifiable at this operating point.
    #[error("rank-deficient Fisher information: {0}")]
    RankDeficient(String),

    #[error("degenerate parameter: {0}")]
    DegenerateParameter(String),

    #[error("degenerate block partition: {0}")]
    DegeneratePartition(String),

    /// The bound is infinite (interference subspace saturated, K >= L).
    #[error("bound diverges: {0}")]
    Divergence(String),

    #[error("undefined moment: {0}")]
    UndefinedMoment(String),

    #[error("pilot degeneracy: {0}")]
    PilotDegeneracy(String),

    #[error("numerical accuracy: {0}")]
    NumericalAccuracy(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// True for errors that mean "the bound is infinite here" rather than a
    /// malformed request. Sweeps serialise these as `inf`.
    pub fn is_infinite_bound(&self) -> bool {
        matches!(
            self,
            Error::Divergence(_) | Error::UndefinedMoment(_) | Error::RankDeficient(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
