use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unknown catalog model `{0}`")]
    UnknownModel(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid model definition: {0}")]
    InvalidModel(String),

    #[error("point {0:?} lies outside the smooth domain")]
    OutsideDomain(Vec<f64>),

    #[error("Newton iteration did not converge after {iterations} steps (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("equilibrium {0:?} lies on the domain boundary")]
    BoundaryEquilibrium(Vec<f64>),

    #[error("matrix is not Hurwitz (spectral abscissa {0})")]
    NotHurwitz(f64),

    #[error("equilibrium is unstable; coupled simulation refused")]
    Unstable,

    #[error("non-finite state at t={0}")]
    NonFinite(f64),

    #[error("domain exit at t={0}")]
    DomainExit(f64),

    #[error("time {t} outside [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("all {0} replicas were censored at the maximal horizon")]
    AllCensored(usize),

    #[error("no replica survived (survival estimate {0})")]
    NoSurvivors(f64),

    #[error("threshold unreachable: {0}")]
    Unreachable(String),

    #[error("empty sample")]
    EmptySample,

    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::InvalidModel(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
