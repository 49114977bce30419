//! Pass orchestration for the simulated ground station.
//!
//! A [`PassPlan`] built from a [`Scenario`] is flown by [`run_pass`] against
//! an in-process [`ogs_bus::Bus`]: the state machine in [`state`] sequences
//! slew, acquisition, tracking and the QKD session while every subsystem
//! publishes its telemetry on the bus. The resulting envelope log is the
//! record of the pass; [`replay`] derives statistics from it.

pub mod error;
pub mod pass;
pub mod replay;
pub mod scenario;
pub mod selftest;
pub mod state;

pub use error::{ControllerError, Result};
pub use pass::{run_pass, simulate, PassPlan, PassReport};
pub use replay::{derive_stats, LogStats};
pub use scenario::{parse_scenario, scenario_schema, Scenario};
pub use state::{transition, Event, StateMachine, StationState};
