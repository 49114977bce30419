use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BusError {
    #[error("topic `{0}` is not in the topic table")]
    UnregisteredTopic(String),

    #[error("cannot publish to wildcard topic `{0}`")]
    WildcardPublish(String),

    #[error("malformed topic pattern `{0}`")]
    MalformedPattern(String),

    #[error("payload on `{topic}` violates its schema at {path}: {message}")]
    Schema { topic: String, path: String, message: String },

    #[error("subscriber queue full on at-least-once topic `{0}`")]
    Backpressure(String),

    #[error("no handler registered for `{0}`")]
    NoHandler(String),

    #[error("command on `{topic}` failed: no acknowledgement after {attempts} attempt(s)")]
    CommandFailed { topic: String, attempts: u32 },

    #[error("invalid broker url `{url}`: {reason}")]
    BrokerUrl { url: String, reason: String },

    #[error("broker connection: {0}")]
    Mqtt(String),

    #[error("envelope log: {0}")]
    Log(String),
}

pub type Result<T> = std::result::Result<T, BusError>;
