//! Flying one pass: the slow orchestration tick, the fast tracking loop
//! nested inside it, and the telemetry they publish.

use std::sync::Arc;

use parking_lot::Mutex;

use ogs_bus::topics;
use ogs_bus::{Bus, Envelope};
use ogs_core::beacon::{compute_uplink_pointing, validate_beacon, BeaconConfig};
use ogs_core::ephemeris::{generate_pass, PassEphemeris, PassSample};
use ogs_core::frontend::{compute_qkd_fov, fiber_coupling_efficiency, route_wavelength, OpticalChannel};
use ogs_core::polarization::{random_unitary, JonesMatrix};
use ogs_core::qkd::{select_filter, ChannelModel, CorrectionMode, PolarizationCorrector, QkdConfig, QkdReceiver, SessionStats};
use ogs_core::tracking::{TrackingConfig, TrackingLoop, TrackingRecord};
use ogs_core::turbulence::{JitterGenerator, TurbulenceParams};
use ogs_bus::BusError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{ControllerError, Result};
use crate::scenario::{ChannelSpec, Scenario, ScheduledCommand};
use crate::state::{transition, Event, StateMachine, StationState, Transition};

/// A validated scenario with its pass geometry and derived optics.
#[derive(Debug, Clone)]
pub struct PassPlan {
    pub pass_id: String,
    pub scenario: Scenario,
    pub ephemeris: PassEphemeris,
    pub qkd_fov_rad: f64,
    pub channel: ChannelModel,
}

impl PassPlan {
    pub fn new(scenario: Scenario) -> Result<Self> {
        scenario.validate()?;
        let ephemeris = generate_pass(&scenario.site, &scenario.orbit, scenario.timing.ephemeris_step_s)?;
        // the field stop is sized for the worse of the design case and this pass
        let worst = TurbulenceParams::worst_case();
        let sizing = if scenario.turbulence.r0_550_m < worst.r0_550_m {
            scenario.turbulence
        } else {
            worst
        };
        let qkd_fov_rad = scenario
            .station
            .qkd_fov_rad
            .unwrap_or_else(|| compute_qkd_fov(&sizing, scenario.mission.qkd_lambda_nm));
        let static_part = match scenario.mission.channel {
            ChannelSpec::Identity => JonesMatrix::identity(),
            ChannelSpec::Random(seed) => random_unitary(&mut ChaCha8Rng::seed_from_u64(seed)),
        };
        let o = &scenario.orbit;
        let pass_id = format!(
            "{:.0}km-{:.0}deg-{}-{}",
            o.altitude_km,
            o.max_elevation_deg,
            match o.direction {
                ogs_core::ephemeris::PassDirection::Ascending => "asc",
                ogs_core::ephemeris::PassDirection::Descending => "desc",
            },
            scenario.seed
        );
        Ok(Self {
            pass_id,
            scenario,
            ephemeris,
            qkd_fov_rad,
            channel: ChannelModel { static_part },
        })
    }

    /// End of the simulated interval, s.
    pub fn end_t(&self) -> f64 {
        let full = self.ephemeris.duration();
        self.scenario.timing.duration_s.map_or(full, |d| d.min(full))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassReport {
    pub pass_id: String,
    pub final_state: StationState,
    pub transitions: Vec<Transition>,
    pub rejected_events: u64,
    pub lock_losses: u32,
    pub first_lock_t: Option<f64>,
    pub qkd_active_s: f64,
    pub end_t: f64,
    pub qkd: SessionStats,
    pub fault_cause: Option<String>,
    /// Per-axis residual RMS over fast ticks after the first lock, rad.
    pub residual_rms: [f64; 2],
    /// Per-axis RMS of the turbulence tilt over the same ticks, rad.
    pub jitter_rms: [f64; 2],
    /// Fraction of fast ticks after the first lock with lock asserted.
    pub lock_fraction: f64,
    pub saturated_ticks: u64,
    pub offloads: usize,
    /// Largest single-tick waveplate move, degrees.
    pub max_waveplate_step_deg: f64,
    pub command_failures: Vec<String>,
}

impl PassReport {
    /// Share of the time after first lock spent in QKD_ACTIVE.
    pub fn qkd_dwell_fraction(&self) -> f64 {
        match self.first_lock_t {
            Some(t0) if self.end_t > t0 => self.qkd_active_s / (self.end_t - t0),
            _ => 0.0,
        }
    }
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mode_name(m: CorrectionMode) -> &'static str {
    match m {
        CorrectionMode::OpenLoop => "open_loop",
        CorrectionMode::ClosedLoop => "closed_loop",
        CorrectionMode::Off => "off",
    }
}

fn parse_mode(v: &Value) -> std::result::Result<CorrectionMode, String> {
    serde_json::from_value(v.clone()).map_err(|_| format!("unknown correction mode {v}"))
}

/// Requests recorded by the command handlers and applied at the next slow tick.
#[derive(Debug, Default)]
struct Pending {
    state: Option<StationState>,
    events: Vec<Event>,
    mode: Option<CorrectionMode>,
    pol_gain: Option<f64>,
    gains: Option<(f64, f64)>,
    current_gains: (f64, f64),
    qkd_lambda_nm: Option<f64>,
    beacon: Option<(bool, BeaconConfig)>,
    current_beacon: (bool, BeaconConfig),
}

type Shared = Arc<Mutex<Pending>>;

fn register_handlers(bus: &Bus, shared: &Shared) -> Result<()> {
    let s = shared.clone();
    bus.register_handler(topics::CONTROLLER_CMD, move |env| {
        let p = &env.payload;
        let mut st = s.lock();
        let state = st.state.unwrap_or(StationState::Idle);
        match p.get("action").and_then(Value::as_str) {
            Some("start_pass") => {
                transition(state, Event::PassStart).map_err(|e| e.to_string())?;
                st.events.push(Event::PassStart);
                Ok(json!({"accepted": "start_pass"}))
            }
            Some("abort") => {
                transition(state, Event::PassOver).map_err(|e| e.to_string())?;
                st.events.push(Event::PassOver);
                Ok(json!({"accepted": "abort"}))
            }
            Some("set_mode") => {
                let mode = parse_mode(p.get("mode").ok_or("set_mode needs `mode`")?)?;
                st.mode = Some(mode);
                Ok(json!({"mode": mode_name(mode)}))
            }
            other => Err(format!("unknown action {other:?}")),
        }
    })?;

    let s = shared.clone();
    bus.register_handler(topics::TRACK_CMD, move |env| {
        let p = &env.payload;
        let mut st = s.lock();
        let (kp0, ki0) = st.gains.unwrap_or(st.current_gains);
        let kp = p.get("kp").and_then(Value::as_f64).unwrap_or(kp0);
        let ki = p.get("ki").and_then(Value::as_f64).unwrap_or(ki0);
        if !(kp >= 0.0 && ki >= 0.0 && kp.is_finite() && ki.is_finite()) {
            return Err(format!("gains kp={kp} ki={ki} must be finite and non-negative"));
        }
        st.gains = Some((kp, ki));
        Ok(json!({"kp": kp, "ki": ki}))
    })?;

    let s = shared.clone();
    bus.register_handler(topics::POL_CMD, move |env| {
        let p = &env.payload;
        let mut st = s.lock();
        let mut result = serde_json::Map::new();
        if let Some(m) = p.get("mode") {
            let mode = parse_mode(m)?;
            st.mode = Some(mode);
            result.insert("mode".into(), json!(mode_name(mode)));
        }
        if let Some(g) = p.get("gain").and_then(Value::as_f64) {
            if !(g > 0.0 && g <= 1.0) {
                return Err(format!("correction gain {g} outside (0, 1]"));
            }
            st.pol_gain = Some(g);
            result.insert("gain".into(), json!(g));
        }
        Ok(Value::Object(result))
    })?;

    let s = shared.clone();
    bus.register_handler(topics::QKD_CMD, move |env| {
        let p = &env.payload;
        let mut st = s.lock();
        let mut result = serde_json::Map::new();
        if let Some(l) = p.get("filter_lambda_nm").and_then(Value::as_f64) {
            let f = select_filter(l).map_err(|e| e.to_string())?;
            st.qkd_lambda_nm = Some(l);
            result.insert("filter".into(), serde_json::to_value(f.id).unwrap_or(Value::Null));
            result.insert("filter_lambda_nm".into(), json!(l));
        }
        if let Some(m) = p.get("mode") {
            let mode = parse_mode(m)?;
            st.mode = Some(mode);
            result.insert("mode".into(), json!(mode_name(mode)));
        }
        Ok(Value::Object(result))
    })?;

    let s = shared.clone();
    bus.register_handler(topics::BOBA_CMD, move |env| {
        let p = &env.payload;
        let mut st = s.lock();
        let (mut enabled, mut cfg) = st.beacon.unwrap_or(st.current_beacon);
        if let Some(e) = p.get("enable").and_then(Value::as_bool) {
            enabled = e;
        }
        if let Some(l) = p.get("lambda_nm").and_then(Value::as_f64) {
            cfg.lambda_nm = l;
        }
        if let Some(w) = p.get("power_w").and_then(Value::as_f64) {
            cfg.power_w = w;
        }
        validate_beacon(&cfg).map_err(|e| e.to_string())?;
        st.beacon = Some((enabled, cfg));
        Ok(json!({"enabled": enabled, "lambda_nm": cfg.lambda_nm, "power_w": cfg.power_w}))
    })?;
    Ok(())
}

fn azimuth_channel(lambda_nm: f64) -> &'static str {
    match route_wavelength(lambda_nm) {
        Ok(OpticalChannel::SwirBeacon) => "SWIR_BEACON",
        _ => "VIS_NIR_BEACON",
    }
}

#[derive(Default)]
struct AxisAccumulator {
    sum_sq: [f64; 2],
    n: u64,
}

impl AxisAccumulator {
    fn push(&mut self, v: [f64; 2]) {
        self.sum_sq[0] += v[0] * v[0];
        self.sum_sq[1] += v[1] * v[1];
        self.n += 1;
    }

    fn rms(&self) -> [f64; 2] {
        if self.n == 0 {
            return [0.0; 2];
        }
        let n = self.n as f64;
        [(self.sum_sq[0] / n).sqrt(), (self.sum_sq[1] / n).sqrt()]
    }
}

struct Runner<'a> {
    plan: &'a PassPlan,
    bus: &'a Bus,
    shared: Shared,
    sm: StateMachine,
    tracking: TrackingLoop,
    jitter: JitterGenerator,
    corrector: Option<PolarizationCorrector>,
    mode: CorrectionMode,
    qkd_cfg: QkdConfig,
    receiver: QkdReceiver,
    rng: ChaCha8Rng,
    beacon: (bool, BeaconConfig),
    detect_since: Option<f64>,
    lock_since: Option<f64>,
    lock_losses: u32,
    first_lock_t: Option<f64>,
    qkd_ticks: u64,
    qkd: SessionStats,
    fault_cause: Option<String>,
    residual: AxisAccumulator,
    jitter_acc: AxisAccumulator,
    locked_ticks: u64,
    post_ticks: u64,
    max_wp_step: f64,
    command_failures: Vec<String>,
    commands: Vec<ScheduledCommand>,
    next_cmd: usize,
}

impl<'a> Runner<'a> {
    fn publish(&self, topic: &str, t: f64, payload: Value) -> Result<Envelope> {
        Ok(self.bus.publish(topic, t, payload)?)
    }

    fn fire(&mut self, t: f64, event: Event, cause: Option<String>) -> Result<bool> {
        let from = self.sm.state();
        match self.sm.fire(t, event) {
            Ok(tr) => {
                log::debug!("t={t:.1} {from} -> {} on {event}", tr.to);
                self.shared.lock().state = Some(tr.to);
                if tr.to == StationState::Fault {
                    self.fault_cause = cause.clone();
                }
                self.publish(
                    topics::CONTROLLER_STATE,
                    t,
                    json!({
                        "state": tr.to.as_str(),
                        "pass_id": self.plan.pass_id,
                        "previous": from.as_str(),
                        "event": event.as_str(),
                        "cause": cause,
                        "warning": null,
                    }),
                )?;
                Ok(true)
            }
            Err(e) => {
                log::warn!("t={t:.1} {e}");
                self.publish(
                    topics::CONTROLLER_STATE,
                    t,
                    json!({
                        "state": from.as_str(),
                        "pass_id": self.plan.pass_id,
                        "previous": from.as_str(),
                        "event": event.as_str(),
                        "cause": null,
                        "warning": e.to_string(),
                    }),
                )?;
                Ok(false)
            }
        }
    }

    fn publish_boba(&self, t: f64, sample: &PassSample) -> Result<()> {
        let (enabled, cfg) = self.beacon;
        let mut payload = json!({
            "enabled": enabled,
            "lambda_nm": cfg.lambda_nm,
            "power_w": cfg.power_w,
            "modulated": cfg.modulated,
        });
        if enabled && self.sm.state() != StationState::Idle {
            let up = compute_uplink_pointing(
                sample,
                self.plan.scenario.station.coalign_offset_rad,
                self.plan.scenario.mission.point_ahead,
            );
            let m = payload.as_object_mut().expect("object");
            m.insert("azimuth_deg".into(), json!(up.azimuth_deg));
            m.insert("elevation_deg".into(), json!(up.elevation_deg));
            m.insert("point_ahead_rad".into(), json!(up.point_ahead_rad));
            m.insert("coalign_offset_rad".into(), json!(up.coalign_offset_rad));
        }
        self.publish(topics::BOBA_STATE, t, payload)?;
        Ok(())
    }

    fn publish_ephemeris(&self) -> Result<()> {
        let e = &self.plan.ephemeris;
        // one point per second keeps the retained message small
        let every = ((1.0 / e.step_s).round() as usize).max(1);
        let track: Vec<Value> = e
            .samples
            .iter()
            .step_by(every)
            .map(|s| json!([s.t, s.azimuth_deg, s.elevation_deg, s.frame_rotation_deg]))
            .collect();
        self.publish(
            topics::EPHEMERIS_PASS,
            0.0,
            json!({
                "pass_id": self.plan.pass_id,
                "altitude_km": e.orbit.altitude_km,
                "max_elevation_deg": e.orbit.max_elevation_deg,
                "direction": e.orbit.direction,
                "step_s": e.step_s,
                "culmination_t": e.culmination_t,
                "track": track,
            }),
        )?;
        Ok(())
    }

    fn apply_pending(&mut self, t: f64) -> Result<()> {
        let (events, mode, pol_gain, gains, lambda, beacon) = {
            let mut p = self.shared.lock();
            (
                std::mem::take(&mut p.events),
                p.mode.take(),
                p.pol_gain.take(),
                p.gains.take(),
                p.qkd_lambda_nm.take(),
                p.beacon.take(),
            )
        };
        for e in events {
            self.fire(t, e, None)?;
        }
        if let Some(m) = mode {
            self.mode = m;
            if let Some(c) = self.corrector.as_mut() {
                c.set_mode(m);
            }
        }
        if let Some(g) = pol_gain {
            self.qkd_cfg.closed_loop_gain = g;
            if let Some(c) = self.corrector.as_mut() {
                c.set_gain(g);
            }
        }
        if let Some((kp, ki)) = gains {
            self.tracking.set_gains(kp, ki);
            self.shared.lock().current_gains = (kp, ki);
        }
        if let Some(l) = lambda {
            self.qkd_cfg.lambda_nm = l;
            self.receiver = QkdReceiver::new(self.qkd_cfg, self.plan.qkd_fov_rad, self.plan.scenario.station.aperture_m)?;
            self.receiver.restart(t);
        }
        if let Some(b) = beacon {
            self.beacon = b;
            self.shared.lock().current_beacon = b;
            self.publish_boba(t, &self.plan.ephemeris.sample_at(t))?;
        }
        Ok(())
    }

    fn new_corrector(&self, t: f64, mode: CorrectionMode) -> Result<PolarizationCorrector> {
        let sample = self.plan.ephemeris.sample_at(t);
        let schedule = self.plan.channel.schedule(&self.plan.ephemeris)?;
        Ok(PolarizationCorrector::new(mode, &self.plan.channel.at(&sample), Some(schedule), &self.qkd_cfg)?)
    }

    fn run_commands(&mut self, t: f64) -> Result<()> {
        while self.next_cmd < self.commands.len() && self.commands[self.next_cmd].t <= t + 1e-9 {
            let c = self.commands[self.next_cmd].clone();
            self.next_cmd += 1;
            if self.plan.scenario.faults.duplicate_commands {
                self.bus.inject_duplicate(&c.topic);
            }
            match self
                .bus
                .command_roundtrip(&c.topic, t, c.payload.clone(), self.plan.scenario.timing.command_timeout_s)
            {
                Ok(ack) => {
                    if ack.get("ok") == Some(&Value::Bool(false)) {
                        let why = ack.get("error").and_then(Value::as_str).unwrap_or("rejected");
                        self.command_failures.push(format!("{} at t={t}: {why}", c.topic));
                    }
                }
                Err(e @ (BusError::CommandFailed { .. } | BusError::Schema { .. })) => {
                    log::warn!("{e}");
                    self.command_failures.push(format!("{} at t={t}: {e}", c.topic));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    /// Fast loop over one slow tick. Returns the records' summary.
    fn fast_ticks(&mut self, t: f64, dt: f64, n: usize) -> (TrackingRecord, [f64; 2], bool, bool) {
        let fast_dt = dt / n as f64;
        let st = &self.plan.scenario.station;
        let faults = &self.plan.scenario.faults;
        let mut tick_acc = AxisAccumulator::default();
        let mut lost = false;
        let mut was_locked = self.tracking.locked();
        let mut last = None;
        for i in 0..n {
            let tf = t + i as f64 * fast_dt;
            let j = self.jitter.next_sample();
            let d = [
                j[0] + st.pointing_bias_rad[0] + st.mount_drift_rad_s[0] * tf,
                j[1] + st.pointing_bias_rad[1] + st.mount_drift_rad_s[1] * tf,
            ];
            let intensity = if faults.beacon_visible(tf) { 1.0 } else { 0.0 };
            let rec = self.tracking.step(d, intensity);
            tick_acc.push(rec.residual);
            if was_locked && !rec.lock {
                lost = true;
            }
            was_locked = rec.lock;
            if self.first_lock_t.is_none() && rec.lock {
                self.first_lock_t = Some(tf);
            }
            if self.first_lock_t.is_some() {
                self.residual.push(rec.residual);
                self.jitter_acc.push(j);
                self.post_ticks += 1;
                self.locked_ticks += rec.lock as u64;
            }
            last = Some(rec);
        }
        let saturated = self.tracking.fpm().is_saturated();
        (last.expect("at least one fast tick"), tick_acc.rms(), lost, saturated)
    }

    fn tick(&mut self, t: f64, dt: f64, per_tick: usize, k: usize) -> Result<()> {
        let plan: &'a PassPlan = self.plan;
        let sc = &plan.scenario;
        let mask = sc.site.horizon_mask_deg;
        let t_end = (k + 1) as f64 / sc.timing.slow_tick_hz;
        let sample = self.plan.ephemeris.sample_at(t);
        let state0 = self.sm.state();
        match state0 {
            StationState::Idle => {
                if k == 0 && sc.timing.auto_start {
                    self.fire(t, Event::PassStart, None)?;
                }
            }
            StationState::Slew => {
                if t - self.sm.entered_at() + 1e-9 >= sc.timing.slew_s && sample.elevation_deg >= mask - 1e-9 {
                    self.fire(t, Event::AboveMask, None)?;
                }
            }
            StationState::CoarseAcq => {
                if sc.faults.beacon_visible(t) {
                    let since = *self.detect_since.get_or_insert(t);
                    if t - since + 1e-9 >= sc.timing.acquisition_delay_s {
                        self.detect_since = None;
                        self.fire(t, Event::BeaconDetected, None)?;
                    }
                } else {
                    self.detect_since = None;
                }
            }
            _ => {}
        }

        if state0.is_tracking() {
            let (rec, tick_rms, lost, saturated) = self.fast_ticks(t, dt, per_tick);
            let locked = self.tracking.locked();

            // polarization correction from TRACK on
            let mut link = None;
            if matches!(state0, StationState::Track | StationState::QkdActive) {
                if self.corrector.is_none() {
                    self.corrector = Some(self.new_corrector(t, self.mode)?);
                }
                let sample_end = plan.ephemeris.sample_at(t_end);
                let channel = plan.channel.at(&sample_end);
                let c = self.corrector.as_mut().expect("corrector");
                let before = c.set();
                let step = c.tick(t_end, dt, &channel, &mut self.rng)?;
                let mode = c.mode();
                self.max_wp_step = self.max_wp_step.max(before.max_step(&step.set));
                link = Some(step.set.composite() * channel);
                let [q1, h, q2] = step.set.angles();
                self.publish(
                    topics::POL_TELEMETRY,
                    t_end,
                    json!({
                        "mode": mode_name(mode),
                        "q1_deg": q1,
                        "h_deg": h,
                        "q2_deg": q2,
                        "azimuth_deg": step.measured_azimuth_deg,
                        "azimuth_channel": azimuth_channel(sc.mission.downlink_beacon_nm),
                        "misalignment_deg": step.misalignment_deg,
                        "frame_rotation_deg": sample_end.frame_rotation_deg,
                    }),
                )?;
            }

            self.publish(
                topics::TRACK_TELEMETRY,
                t_end,
                json!({
                    "raw_error": rec.raw_error,
                    "fpm_command": rec.fpm_command,
                    "residual": rec.residual,
                    "residual_rms": tick_rms,
                    "lock": rec.lock,
                    "offload_offset": rec.offload_offset,
                    "valid": rec.valid,
                    "saturated": saturated,
                }),
            )?;

            match state0 {
                StationState::FineAcq => {
                    if locked && !lost {
                        self.lock_since = Some(t_end);
                        self.fire(t_end, Event::FineLock, None)?;
                    }
                }
                StationState::Track => {
                    if lost && self.lock_since.is_some() {
                        self.lose_lock(t_end)?;
                    } else if locked {
                        let since = *self.lock_since.get_or_insert(t_end);
                        if t_end - since + 1e-9 >= sc.timing.qkd_go_delay_s {
                            self.fire(t_end, Event::QkdGo, None)?;
                            self.receiver.restart(t_end);
                        }
                    }
                }
                StationState::QkdActive => {
                    if lost || !locked {
                        self.lose_lock(t_end)?;
                    } else if let Some(link) = link {
                        self.qkd_ticks += 1;
                        let r = tick_rms[0].hypot(tick_rms[1]);
                        let coupling = fiber_coupling_efficiency(r, self.plan.qkd_fov_rad / 2.0);
                        if let Some(entry) = self.receiver.integrate(t_end, dt, &link, coupling, &mut self.rng) {
                            let filter = select_filter(self.qkd_cfg.lambda_nm)?;
                            self.publish(
                                topics::QKD_TELEMETRY,
                                t_end,
                                json!({
                                    "counts": entry.counts,
                                    "sifted_count": entry.sifted_count,
                                    "error_count": entry.error_count,
                                    "qber": entry.qber,
                                    "background_fraction": entry.background_fraction,
                                    "filter": filter.id,
                                }),
                            )?;
                            self.qkd.entries.push(entry);
                        }
                    }
                }
                _ => {}
            }
        }

        Ok(())
    }

    fn run(mut self) -> Result<PassReport> {
        let plan: &'a PassPlan = self.plan;
        let sc = &plan.scenario;
        let dt = 1.0 / sc.timing.slow_tick_hz;
        let per_tick = (sc.mission.gains.rate_hz / sc.timing.slow_tick_hz).round() as usize;
        let end_t = self.plan.end_t();
        let n_ticks = (end_t / dt + 1e-9).floor() as usize;
        let report_every = (sc.timing.slow_tick_hz.round() as usize).max(1);

        self.publish(
            topics::CONTROLLER_STATE,
            0.0,
            json!({"state": "IDLE", "pass_id": self.plan.pass_id, "previous": null, "event": null, "cause": null, "warning": null}),
        )?;
        self.publish_ephemeris()?;
        self.publish_boba(0.0, &self.plan.ephemeris.sample_at(0.0))?;

        for k in 0..=n_ticks {
            let t = k as f64 / sc.timing.slow_tick_hz;
            let sample = self.plan.ephemeris.sample_at(t);
            self.run_commands(t)?;
            self.apply_pending(t)?;

            if k == n_ticks {
                if !matches!(self.sm.state(), StationState::Idle | StationState::Fault | StationState::PassEnd) {
                    self.fire(t, Event::PassOver, None)?;
                }
                break;
            }

            match self.tick(t, dt, per_tick, k) {
                Ok(()) => {}
                Err(ControllerError::Core(e)) => {
                    self.fire(t, Event::Fault, Some(e.to_string()))?;
                }
                Err(e) => return Err(e),
            }
            if k % report_every == 0 {
                self.publish_boba(t, &sample)?;
            }
            if self.sm.state() == StationState::Fault {
                break;
            }
        }

        Ok(PassReport {
            pass_id: self.plan.pass_id.clone(),
            final_state: self.sm.state(),
            transitions: self.sm.history().to_vec(),
            rejected_events: self.sm.rejected(),
            lock_losses: self.lock_losses,
            first_lock_t: self.first_lock_t,
            qkd_active_s: self.qkd_ticks as f64 / sc.timing.slow_tick_hz,
            end_t,
            qkd: self.qkd,
            fault_cause: self.fault_cause,
            residual_rms: self.residual.rms(),
            jitter_rms: self.jitter_acc.rms(),
            lock_fraction: if self.post_ticks == 0 {
                0.0
            } else {
                self.locked_ticks as f64 / self.post_ticks as f64
            },
            saturated_ticks: self.tracking.saturated_ticks(),
            offloads: self.tracking.offloads().len(),
            max_waveplate_step_deg: self.max_wp_step,
            command_failures: self.command_failures,
        })
    }

    fn lose_lock(&mut self, t: f64) -> Result<()> {
        self.lock_losses += 1;
        self.lock_since = None;
        let limit = self.plan.scenario.timing.max_reacquisitions;
        if self.lock_losses > limit {
            let cause = format!("fine lock lost {} times, more than the {limit} reacquisitions allowed", self.lock_losses);
            self.fire(t, Event::Fault, Some(cause))?;
        } else {
            self.fire(t, Event::LockLost, None)?;
        }
        Ok(())
    }
}

/// Flies `plan` against `bus`, publishing all telemetry on it.
pub fn run_pass(plan: &PassPlan, bus: &Bus) -> Result<PassReport> {
    let sc = &plan.scenario;
    let tracking_cfg: TrackingConfig = sc.tracking_config();
    let seed = sc.seed;
    let turb = TurbulenceParams {
        seed: mix_seed(seed ^ sc.turbulence.seed, 1),
        ..sc.turbulence
    };
    let jitter = JitterGenerator::new(
        &turb,
        sc.station.aperture_m,
        sc.mission.downlink_beacon_nm * 1e-9,
        tracking_cfg.gains.rate_hz,
    )?;
    let tracking = TrackingLoop::new(tracking_cfg, plan.qkd_fov_rad, mix_seed(seed, 2))?;
    let qkd_cfg = sc.qkd_config();
    let receiver = QkdReceiver::new(qkd_cfg, plan.qkd_fov_rad, sc.station.aperture_m)?;
    let beacon = (sc.mission.beacon_enabled, sc.mission.beacon);
    let shared: Shared = Arc::new(Mutex::new(Pending {
        state: Some(StationState::Idle),
        current_gains: (tracking_cfg.gains.kp, tracking_cfg.gains.ki),
        current_beacon: beacon,
        ..Pending::default()
    }));
    register_handlers(bus, &shared)?;
    for topic in &sc.faults.stopped_handlers {
        bus.set_handler_running(topic, false);
    }
    let mut commands = sc.commands.clone();
    commands.sort_by(|a, b| a.t.total_cmp(&b.t));

    let runner = Runner {
        plan,
        bus,
        shared,
        sm: StateMachine::new(),
        tracking,
        jitter,
        corrector: None,
        mode: sc.mission.correction_mode,
        qkd_cfg,
        receiver,
        rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 3)),
        beacon,
        detect_since: None,
        lock_since: None,
        lock_losses: 0,
        first_lock_t: None,
        qkd_ticks: 0,
        qkd: SessionStats::default(),
        fault_cause: None,
        residual: AxisAccumulator::default(),
        jitter_acc: AxisAccumulator::default(),
        locked_ticks: 0,
        post_ticks: 0,
        max_wp_step: 0.0,
        command_failures: Vec::new(),
        commands,
        next_cmd: 0,
    };
    let report = runner.run();
    if let Err(e) = &report {
        log::error!("pass {} aborted: {e}", plan.pass_id);
    }
    report
}

/// Builds the plan and flies it on a fresh in-process bus; returns the
/// report and the full envelope log.
pub fn simulate(scenario: &Scenario) -> Result<(PassReport, Vec<Envelope>)> {
    let plan = PassPlan::new(scenario.clone())?;
    let bus = Bus::with_capacity(1 << 20);
    let report = run_pass(&plan, &bus)?;
    Ok((report, bus.log()))
}
