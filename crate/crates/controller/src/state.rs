//! Station state machine.
//!
//! | from | event | to |
//! |---|---|---|
//! | IDLE | pass_start | SLEW |
//! | SLEW | above_mask | COARSE_ACQ |
//! | COARSE_ACQ | beacon_detected | FINE_ACQ |
//! | FINE_ACQ | fine_lock | TRACK |
//! | TRACK | qkd_go | QKD_ACTIVE |
//! | QKD_ACTIVE | lock_lost | TRACK |
//! | TRACK | lock_lost | FINE_ACQ |
//! | SLEW, COARSE_ACQ, FINE_ACQ, TRACK, QKD_ACTIVE | pass_over | PASS_END |
//! | any but FAULT | fault | FAULT |
//! | FAULT, PASS_END | reset | IDLE |
//!
//! Every other pair is rejected and leaves the state unchanged.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ControllerError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StationState {
    Idle,
    Slew,
    CoarseAcq,
    FineAcq,
    Track,
    QkdActive,
    Fault,
    PassEnd,
}

impl StationState {
    pub const ALL: [StationState; 8] = [
        StationState::Idle,
        StationState::Slew,
        StationState::CoarseAcq,
        StationState::FineAcq,
        StationState::Track,
        StationState::QkdActive,
        StationState::Fault,
        StationState::PassEnd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StationState::Idle => "IDLE",
            StationState::Slew => "SLEW",
            StationState::CoarseAcq => "COARSE_ACQ",
            StationState::FineAcq => "FINE_ACQ",
            StationState::Track => "TRACK",
            StationState::QkdActive => "QKD_ACTIVE",
            StationState::Fault => "FAULT",
            StationState::PassEnd => "PASS_END",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.as_str() == s)
    }

    /// States in which the fine tracking loop runs.
    pub fn is_tracking(self) -> bool {
        matches!(self, StationState::FineAcq | StationState::Track | StationState::QkdActive)
    }
}

impl fmt::Display for StationState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    PassStart,
    AboveMask,
    BeaconDetected,
    FineLock,
    LockLost,
    QkdGo,
    PassOver,
    Fault,
    Reset,
}

impl Event {
    pub const ALL: [Event; 9] = [
        Event::PassStart,
        Event::AboveMask,
        Event::BeaconDetected,
        Event::FineLock,
        Event::LockLost,
        Event::QkdGo,
        Event::PassOver,
        Event::Fault,
        Event::Reset,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Event::PassStart => "pass_start",
            Event::AboveMask => "above_mask",
            Event::BeaconDetected => "beacon_detected",
            Event::FineLock => "fine_lock",
            Event::LockLost => "lock_lost",
            Event::QkdGo => "qkd_go",
            Event::PassOver => "pass_over",
            Event::Fault => "fault",
            Event::Reset => "reset",
        }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The edge table as a pure function.
pub fn transition(state: StationState, event: Event) -> Result<StationState> {
    use Event as E;
    use StationState as S;
    let next = match (state, event) {
        (S::Fault, E::Fault) => None,
        (_, E::Fault) => Some(S::Fault),
        (S::Idle, E::PassStart) => Some(S::Slew),
        (S::Slew, E::AboveMask) => Some(S::CoarseAcq),
        (S::CoarseAcq, E::BeaconDetected) => Some(S::FineAcq),
        (S::FineAcq, E::FineLock) => Some(S::Track),
        (S::Track, E::QkdGo) => Some(S::QkdActive),
        (S::QkdActive, E::LockLost) => Some(S::Track),
        (S::Track, E::LockLost) => Some(S::FineAcq),
        (S::Slew | S::CoarseAcq | S::FineAcq | S::Track | S::QkdActive, E::PassOver) => Some(S::PassEnd),
        (S::Fault | S::PassEnd, E::Reset) => Some(S::Idle),
        _ => None,
    };
    next.ok_or(ControllerError::UndefinedTransition { state, event })
}

/// Every defined `(from, event, to)` triple.
pub fn edges() -> Vec<(StationState, Event, StationState)> {
    let mut out = Vec::new();
    for s in StationState::ALL {
        for e in Event::ALL {
            if let Ok(to) = transition(s, e) {
                out.push((s, e, to));
            }
        }
    }
    out
}

pub fn is_edge(from: StationState, to: StationState) -> bool {
    Event::ALL.iter().any(|&e| transition(from, e).ok() == Some(to))
}

/// Checks that consecutive states are joined by edges; on failure returns
/// the index of the offending step.
pub fn validate_path(states: &[StationState]) -> std::result::Result<(), usize> {
    for (i, w) in states.windows(2).enumerate() {
        if !is_edge(w[0], w[1]) {
            return Err(i + 1);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub t: f64,
    pub from: StationState,
    pub to: StationState,
    pub event: Event,
}

/// Stateful wrapper keeping the accepted history and the rejected count.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMachine {
    state: StationState,
    entered_at: f64,
    history: Vec<Transition>,
    rejected: u64,
}

impl Default for StateMachine {
    fn default() -> Self {
        Self::new()
    }
}

impl StateMachine {
    pub fn new() -> Self {
        Self {
            state: StationState::Idle,
            entered_at: 0.0,
            history: Vec::new(),
            rejected: 0,
        }
    }

    pub fn state(&self) -> StationState {
        self.state
    }

    /// Virtual time the current state was entered.
    pub fn entered_at(&self) -> f64 {
        self.entered_at
    }

    pub fn history(&self) -> &[Transition] {
        &self.history
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn fire(&mut self, t: f64, event: Event) -> Result<Transition> {
        match transition(self.state, event) {
            Ok(to) => {
                let tr = Transition {
                    t,
                    from: self.state,
                    to,
                    event,
                };
                self.state = to;
                self.entered_at = t;
                self.history.push(tr);
                Ok(tr)
            }
            Err(e) => {
                self.rejected += 1;
                Err(e)
            }
        }
    }

    /// Visited states, starting with IDLE.
    pub fn path(&self) -> Vec<StationState> {
        std::iter::once(StationState::Idle)
            .chain(self.history.iter().map(|t| t.to))
            .collect()
    }
}
