//! Statistics derived from an envelope log.
//!
//! `run` and `replay` both call [`derive_stats`]; the log is the only input,
//! so a recorded pass replays to the same numbers bit for bit.

use ogs_bus::topics;
use ogs_bus::Envelope;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{ControllerError, Result};
use crate::state::{validate_path, StationState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QberPoint {
    pub t: f64,
    pub qber: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogStats {
    pub envelopes: usize,
    pub pass_id: Option<String>,
    /// Visited states in order, starting with the first published state.
    pub states: Vec<StationState>,
    pub final_state: Option<StationState>,
    /// Rejected transitions reported on the state topic.
    pub warnings: usize,
    pub qber: Vec<QberPoint>,
    /// Share of QKD reports with a defined QBER below 2 %.
    pub qber_below_2pct: f64,
    /// Per-axis residual RMS over tracking telemetry from the first lock on, rad.
    pub residual_rms: [f64; 2],
    /// Share of tracking reports from the first lock on with lock asserted.
    pub lock_fraction: f64,
    /// QKD reports published while the station was not in QKD_ACTIVE.
    pub qkd_outside_active: usize,
    pub acks: usize,
    pub failed_acks: usize,
    /// Largest change of any waveplate between consecutive reports, degrees.
    pub max_waveplate_step_deg: f64,
}

fn pair(v: &Value) -> Option<[f64; 2]> {
    let a = v.as_array()?;
    Some([a.first()?.as_f64()?, a.get(1)?.as_f64()?])
}

fn bad(env: &Envelope, what: &str) -> ControllerError {
    ControllerError::Log(format!("{} seq {}: {what}", env.topic, env.seq))
}

pub fn derive_stats(log: &[Envelope]) -> Result<LogStats> {
    let mut states: Vec<StationState> = Vec::new();
    let mut pass_id = None;
    let mut warnings = 0;
    let mut qber = Vec::new();
    let mut sum_sq = [0.0; 2];
    let mut n_track = 0u64;
    let mut n_locked = 0u64;
    let mut seen_lock = false;
    let mut qkd_outside = 0;
    let (mut acks, mut failed) = (0, 0);
    let mut last_plates: Option<[f64; 3]> = None;
    let mut max_step: f64 = 0.0;

    for env in log {
        let p = &env.payload;
        match env.topic.as_str() {
            topics::CONTROLLER_STATE => {
                let s = p
                    .get("state")
                    .and_then(Value::as_str)
                    .and_then(StationState::parse)
                    .ok_or_else(|| bad(env, "missing or unknown state"))?;
                if let Some(id) = p.get("pass_id").and_then(Value::as_str) {
                    pass_id = Some(id.to_string());
                }
                if p.get("warning").is_some_and(|w| !w.is_null()) {
                    warnings += 1;
                }
                if states.last() != Some(&s) {
                    states.push(s);
                }
            }
            topics::TRACK_TELEMETRY => {
                let lock = p.get("lock").and_then(Value::as_bool).ok_or_else(|| bad(env, "no lock flag"))?;
                seen_lock |= lock;
                if seen_lock {
                    let r = p.get("residual_rms").and_then(pair).ok_or_else(|| bad(env, "no residual_rms"))?;
                    sum_sq[0] += r[0] * r[0];
                    sum_sq[1] += r[1] * r[1];
                    n_track += 1;
                    n_locked += lock as u64;
                }
            }
            topics::QKD_TELEMETRY => {
                if states.last() != Some(&StationState::QkdActive) {
                    qkd_outside += 1;
                }
                qber.push(QberPoint {
                    t: env.t_virtual,
                    qber: p.get("qber").and_then(Value::as_f64),
                });
            }
            topics::POL_TELEMETRY => {
                let get = |k: &str| p.get(k).and_then(Value::as_f64).ok_or_else(|| bad(env, k));
                let plates = [get("q1_deg")?, get("h_deg")?, get("q2_deg")?];
                if let Some(prev) = last_plates {
                    for (a, b) in prev.iter().zip(&plates) {
                        max_step = max_step.max((a - b).abs());
                    }
                }
                last_plates = Some(plates);
            }
            t if t.ends_with(topics::ACK_SUFFIX) => {
                acks += 1;
                if p.get("ok") == Some(&Value::Bool(false)) {
                    failed += 1;
                }
            }
            _ => {}
        }
    }

    let n = n_track.max(1) as f64;
    let below = qber.iter().filter(|q| q.qber.is_some_and(|x| x < 0.02)).count();
    Ok(LogStats {
        envelopes: log.len(),
        pass_id,
        final_state: states.last().copied(),
        states,
        warnings,
        qber_below_2pct: if qber.is_empty() { 0.0 } else { below as f64 / qber.len() as f64 },
        qber,
        residual_rms: [(sum_sq[0] / n).sqrt(), (sum_sq[1] / n).sqrt()],
        lock_fraction: if n_track == 0 { 0.0 } else { n_locked as f64 / n_track as f64 },
        qkd_outside_active: qkd_outside,
        acks,
        failed_acks: failed,
        max_waveplate_step_deg: max_step,
    })
}

/// Checks the state history in `log` against the edge table.
pub fn check_state_log(log: &[Envelope]) -> Result<Vec<StationState>> {
    let stats = derive_stats(log)?;
    validate_path(&stats.states).map_err(|i| {
        ControllerError::Log(format!(
            "undocumented transition {} -> {}",
            stats.states[i - 1], stats.states[i]
        ))
    })?;
    Ok(stats.states)
}
