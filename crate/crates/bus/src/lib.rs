//! Publish/subscribe transport for the ground station.
//!
//! [`Bus`] is the deterministic in-process implementation used by the
//! simulation; [`mqtt::MqttBridge`] mirrors it onto an MQTT 3.1.1 broker so
//! operator consoles can watch telemetry and send commands. Both speak the
//! same topic table and payload schemas ([`topics`]).

pub mod bus;
pub mod error;
pub mod mqtt;
pub mod schema;
pub mod topics;

pub use bus::{read_jsonl, write_jsonl, Bus, Envelope, Subscription, TopicPattern};
pub use error::{BusError, Result};
pub use topics::Qos;
