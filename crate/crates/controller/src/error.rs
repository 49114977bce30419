use thiserror::Error;

use crate::state::{Event, StationState};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("scenario field `{path}`: {message}")]
    Scenario { path: String, message: String },

    #[error("scenario cross-reference: {0}")]
    CrossReference(String),

    #[error("no transition from {state} on `{event}`")]
    UndefinedTransition { state: StationState, event: Event },

    #[error("log: {0}")]
    Log(String),

    #[error(transparent)]
    Core(#[from] ogs_core::Error),

    #[error(transparent)]
    Bus(#[from] ogs_bus::BusError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ControllerError>;
