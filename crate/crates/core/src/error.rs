use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("unknown concept `{0}`")]
    UnknownConcept(String),
    #[error("training diverged at step {step}")]
    TrainingDivergence { step: usize },
    #[error("sampling diverged at timestep {t}")]
    SamplingDivergence { t: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Param(msg.into()))
}
