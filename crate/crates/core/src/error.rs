use thiserror::Error;

use crate::simulate::Trajectory;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug, Clone)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown state `{0}`")]
    UnknownState(String),

    #[error("edge ({0}, {1}) has no positive jump rate")]
    UnknownEdge(usize, usize),

    #[error("kernel is reducible: no unique invariant measure")]
    NoUniqueInvariant,

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("flow has nonzero divergence (max |div| = {max_abs:e})")]
    NonzeroDivergence { max_abs: f64 },

    #[error("rate function is infinite at the given pair")]
    InfiniteRate,

    #[error("truncation set carries no mass")]
    EmptyTruncation,

    #[error("no oriented path in the ambient graph connects state {from} to state {to}")]
    DisconnectedAmbient { from: usize, to: usize },

    #[error("flow charges edge ({0}, {1}) whose source has zero measure")]
    UnsupportedFlow(usize, usize),

    #[error("tilted chain never reached the event in the pilot batch")]
    DegenerateTilt,

    #[error("chain absorbed at time {time} before horizon")]
    AbsorbedBeforeHorizon { time: f64, trajectory: Box<Trajectory> },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
