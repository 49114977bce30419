//! Fine tracking: centroid sensor, fine-pointing-mirror PI loop, mount
//! offloading and lock assessment.
//!
//! The loop runs in angle-of-arrival space. At every tick the sensor sees the
//! residual `disturbance − (mount offset + applied FPM command)`; the command
//! computed from that frame is applied on the following tick.
//!
//! The PI law is incremental: `command += kp·e + ki·∫e dt`, clamped to the
//! actuator range. While an axis is clamped its integrator is frozen, and
//! invalid frames (beacon below the detection threshold) hold both the
//! command and the integrator.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{mean, rms};
use crate::turbulence::JitterSeries;

/// Default fast-loop rate, Hz.
pub const DEFAULT_CONTROL_RATE_HZ: f64 = 20_000.0;
/// Default FPM range, ± rad in angle-of-arrival space.
pub const DEFAULT_FPM_LIMIT_RAD: f64 = 1e-3;
/// Fraction of ticks that may saturate before telemetry is marked degraded.
pub const DEGRADED_SATURATION_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct LoopGains {
    pub kp: f64,
    /// Integral gain, 1/s.
    pub ki: f64,
    pub rate_hz: f64,
}

impl Default for LoopGains {
    fn default() -> Self {
        Self {
            kp: 0.5,
            ki: 50.0,
            rate_hz: DEFAULT_CONTROL_RATE_HZ,
        }
    }
}

impl LoopGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.kp >= 0.0 && self.ki >= 0.0) {
            return Err(Error::Config(format!("loop gains must be non-negative (kp {}, ki {})", self.kp, self.ki)));
        }
        if !(self.rate_hz > 0.0) {
            return Err(Error::Config(format!("control rate {} Hz must be positive", self.rate_hz)));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate_hz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame {
    pub t: f64,
    pub cx_rad: f64,
    pub cy_rad: f64,
    pub intensity: f64,
    pub valid: bool,
}

/// Fine acquisition and tracking sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct CentroidSensor {
    /// Additive centroid noise per axis, rad RMS.
    pub noise_rms_rad: f64,
    /// Frames dimmer than this are flagged invalid.
    pub detection_threshold: f64,
    pub half_fov_rad: f64,
}

impl Default for CentroidSensor {
    fn default() -> Self {
        Self {
            noise_rms_rad: 0.2e-6,
            detection_threshold: 0.05,
            half_fov_rad: 500e-6,
        }
    }
}

impl CentroidSensor {
    /// Reads the centroid of a spot displaced by `true_residual_rad`.
    ///
    /// Invalid frames carry zero centroids that must not be used.
    pub fn sense<R: Rng + ?Sized>(
        &self,
        t: f64,
        true_residual_rad: [f64; 2],
        intensity: f64,
        rng: &mut R,
    ) -> SensorFrame {
        sense_centroid(t, true_residual_rad, self.noise_rms_rad, intensity, self, rng)
    }
}

pub fn sense_centroid<R: Rng + ?Sized>(
    t: f64,
    true_residual_rad: [f64; 2],
    noise_rms_rad: f64,
    intensity: f64,
    sensor: &CentroidSensor,
    rng: &mut R,
) -> SensorFrame {
    // noise is drawn for every frame so that the random stream does not
    // depend on beacon dropouts
    let nx: f64 = rng.sample(StandardNormal);
    let ny: f64 = rng.sample(StandardNormal);
    if !(intensity >= sensor.detection_threshold) {
        return SensorFrame {
            t,
            cx_rad: 0.0,
            cy_rad: 0.0,
            intensity,
            valid: false,
        };
    }
    let h = sensor.half_fov_rad;
    SensorFrame {
        t,
        cx_rad: (true_residual_rad[0] + noise_rms_rad * nx).clamp(-h, h),
        cy_rad: (true_residual_rad[1] + noise_rms_rad * ny).clamp(-h, h),
        intensity,
        valid: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpmState {
    pub tip_rad: f64,
    pub tilt_rad: f64,
    pub limits_rad: f64,
    /// Set per axis when the last command was clamped.
    pub saturated: [bool; 2],
}

impl FpmState {
    pub fn centered(limits_rad: f64) -> Self {
        Self {
            tip_rad: 0.0,
            tilt_rad: 0.0,
            limits_rad,
            saturated: [false; 2],
        }
    }

    pub fn command(&self) -> [f64; 2] {
        [self.tip_rad, self.tilt_rad]
    }

    pub fn is_saturated(&self) -> bool {
        self.saturated[0] || self.saturated[1]
    }
}

/// Integrated error per axis, rad·s.
pub type Integrator = [f64; 2];

/// One PI update from a sensor frame.
pub fn pi_update(gains: &LoopGains, frame: &SensorFrame, state: &FpmState, integrator: &Integrator) -> (FpmState, Integrator) {
    if !frame.valid {
        return (*state, *integrator);
    }
    let dt = gains.dt();
    let errors = [frame.cx_rad, frame.cy_rad];
    let prev = state.command();
    let mut out = *state;
    let mut integ = *integrator;
    let mut cmd = [0.0; 2];
    for k in 0..2 {
        let i_next = integrator[k] + errors[k] * dt;
        let raw = prev[k] + gains.kp * errors[k] + gains.ki * i_next;
        if raw.abs() > state.limits_rad {
            cmd[k] = raw.clamp(-state.limits_rad, state.limits_rad);
            out.saturated[k] = true;
        } else {
            cmd[k] = raw;
            out.saturated[k] = false;
            integ[k] = i_next;
        }
    }
    out.tip_rad = cmd[0];
    out.tilt_rad = cmd[1];
    (out, integ)
}

/// Offload decision: if the windowed mean FPM command exceeds
/// `threshold_fraction` of the range on either axis, returns the mean as a
/// mount offset (the caller recenters the FPM by the same amount).
pub fn offload_check(state: &FpmState, window_mean_rad: [f64; 2], threshold_fraction: f64) -> Option<[f64; 2]> {
    let limit = threshold_fraction * state.limits_rad;
    if window_mean_rad.iter().any(|m| m.abs() > limit) {
        Some(window_mean_rad)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct LockRule {
    /// Lock threshold as a fraction of the QKD field of view.
    pub k_fraction: f64,
    pub n_consecutive: usize,
    pub window_ticks: usize,
}

impl Default for LockRule {
    fn default() -> Self {
        Self {
            k_fraction: 1.0 / 3.0,
            n_consecutive: 3,
            window_ticks: 100,
        }
    }
}

impl LockRule {
    pub fn threshold(&self, fov_rad: f64) -> f64 {
        self.k_fraction * fov_rad
    }
}

/// Windowed radial RMS of the residual; `None` if any frame in the window was invalid.
fn window_rms(records: &[TrackingRecord]) -> Option<f64> {
    if records.iter().any(|r| !r.valid) {
        return None;
    }
    let ss: f64 = records
        .iter()
        .map(|r| r.residual[0].powi(2) + r.residual[1].powi(2))
        .sum();
    Some((ss / records.len() as f64).sqrt())
}

/// Stateless lock test over the trailing `n_consecutive` windows of `records`.
pub fn assess_lock(records: &[TrackingRecord], fov_rad: f64, rule: &LockRule) -> Result<bool> {
    let needed = rule.n_consecutive * rule.window_ticks;
    if rule.window_ticks == 0 || records.len() < needed {
        return Err(Error::Precondition(format!(
            "lock assessment needs {needed} records, got {}",
            records.len()
        )));
    }
    let threshold = rule.threshold(fov_rad);
    let tail = &records[records.len() - needed..];
    Ok(tail
        .chunks(rule.window_ticks)
        .all(|w| window_rms(w).is_some_and(|r| r < threshold)))
}

/// Lock state machine with hysteresis, evaluated at window boundaries.
#[derive(Debug, Clone)]
pub struct LockAssessor {
    rule: LockRule,
    threshold: f64,
    locked: bool,
    good_windows: usize,
    sum_sq: f64,
    count: usize,
    invalid: bool,
}

impl LockAssessor {
    pub fn new(rule: LockRule, fov_rad: f64) -> Self {
        Self {
            threshold: rule.threshold(fov_rad),
            rule,
            locked: false,
            good_windows: 0,
            sum_sq: 0.0,
            count: 0,
            invalid: false,
        }
    }

    pub fn locked(&self) -> bool {
        self.locked
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Feeds one tick; returns `Some(rms)` at the end of each window.
    pub fn push(&mut self, residual: [f64; 2], valid: bool) -> Option<f64> {
        self.sum_sq += residual[0].powi(2) + residual[1].powi(2);
        self.invalid |= !valid;
        self.count += 1;
        if self.count < self.rule.window_ticks {
            return None;
        }
        let rms = (self.sum_sq / self.count as f64).sqrt();
        let invalid = self.invalid;
        self.sum_sq = 0.0;
        self.count = 0;
        self.invalid = false;
        if self.locked {
            if invalid || rms > 1.5 * self.threshold {
                self.locked = false;
                self.good_windows = 0;
            }
        } else if !invalid && rms < self.threshold {
            self.good_windows += 1;
            if self.good_windows >= self.rule.n_consecutive {
                self.locked = true;
            }
        } else {
            self.good_windows = 0;
        }
        Some(rms)
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.rule, 0.0).with_threshold(self.threshold);
    }

    fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingConfig {
    pub gains: LoopGains,
    pub sensor: CentroidSensor,
    pub fpm_limit_rad: f64,
    pub lock: LockRule,
    /// Offload when the windowed mean command exceeds this fraction of range.
    pub offload_threshold: f64,
    /// Offload check period, s.
    pub offload_period_s: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            gains: LoopGains::default(),
            sensor: CentroidSensor::default(),
            fpm_limit_rad: DEFAULT_FPM_LIMIT_RAD,
            lock: LockRule::default(),
            offload_threshold: 0.5,
            offload_period_s: 0.1,
        }
    }
}

impl TrackingConfig {
    pub fn validate(&self) -> Result<()> {
        self.gains.validate()?;
        if !(self.fpm_limit_rad > 0.0) {
            return Err(Error::Config("FPM limit must be positive".into()));
        }
        if !(self.offload_threshold > 0.0 && self.offload_threshold < 1.0) {
            return Err(Error::Config(format!(
                "offload threshold {} outside (0, 1)",
                self.offload_threshold
            )));
        }
        if self.lock.n_consecutive == 0 || self.lock.window_ticks == 0 {
            return Err(Error::Config("lock rule needs non-zero windows".into()));
        }
        if !(self.sensor.noise_rms_rad >= 0.0) {
            return Err(Error::Config("sensor noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingRecord {
    pub t: f64,
    /// Sensor reading (zeros when invalid).
    pub raw_error: [f64; 2],
    /// FPM command computed this tick, applied on the next.
    pub fpm_command: [f64; 2],
    /// True residual this tick.
    pub residual: [f64; 2],
    pub lock: bool,
    /// Cumulative mount offset.
    pub offload_offset: [f64; 2],
    pub valid: bool,
}

/// Fast tracking loop stepped one tick at a time.
#[derive(Debug, Clone)]
pub struct TrackingLoop {
    cfg: TrackingConfig,
    fpm: FpmState,
    applied: [f64; 2],
    integrator: Integrator,
    mount_offset: [f64; 2],
    lock: LockAssessor,
    rng: ChaCha8Rng,
    tick: u64,
    offload_ticks: u64,
    window_sum: [f64; 2],
    window_count: usize,
    saturated_ticks: u64,
    offloads: Vec<(f64, [f64; 2])>,
}

impl TrackingLoop {
    pub fn new(cfg: TrackingConfig, fov_rad: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let offload_ticks = ((cfg.offload_period_s * cfg.gains.rate_hz).round() as u64).max(1);
        Ok(Self {
            fpm: FpmState::centered(cfg.fpm_limit_rad),
            applied: [0.0; 2],
            integrator: [0.0; 2],
            mount_offset: [0.0; 2],
            lock: LockAssessor::new(cfg.lock, fov_rad),
            rng: ChaCha8Rng::seed_from_u64(seed),
            tick: 0,
            offload_ticks,
            window_sum: [0.0; 2],
            window_count: 0,
            saturated_ticks: 0,
            offloads: Vec::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &TrackingConfig {
        &self.cfg
    }

    pub fn set_gains(&mut self, kp: f64, ki: f64) {
        self.cfg.gains.kp = kp;
        self.cfg.gains.ki = ki;
    }

    pub fn locked(&self) -> bool {
        self.lock.locked()
    }

    pub fn lock_threshold(&self) -> f64 {
        self.lock.threshold()
    }

    pub fn fpm(&self) -> &FpmState {
        &self.fpm
    }

    pub fn integrator(&self) -> Integrator {
        self.integrator
    }

    pub fn mount_offset(&self) -> [f64; 2] {
        self.mount_offset
    }

    pub fn saturated_ticks(&self) -> u64 {
        self.saturated_ticks
    }

    pub fn ticks(&self) -> u64 {
        self.tick
    }

    /// Offloads issued so far as `(t, offset)`.
    pub fn offloads(&self) -> &[(f64, [f64; 2])] {
        &self.offloads
    }

    /// Advances one tick against `disturbance` with beacon `intensity`.
    pub fn step(&mut self, disturbance: [f64; 2], intensity: f64) -> TrackingRecord {
        let t = self.tick as f64 / self.cfg.gains.rate_hz;
        let residual = [
            disturbance[0] - self.mount_offset[0] - self.applied[0],
            disturbance[1] - self.mount_offset[1] - self.applied[1],
        ];
        let frame = self.cfg.sensor.sense(t, residual, intensity, &mut self.rng);
        let (fpm, integ) = pi_update(&self.cfg.gains, &frame, &self.fpm, &self.integrator);
        self.fpm = fpm;
        self.integrator = integ;
        if frame.valid && fpm.is_saturated() {
            self.saturated_ticks += 1;
        }
        self.lock.push(residual, frame.valid);

        self.window_sum[0] += self.fpm.tip_rad;
        self.window_sum[1] += self.fpm.tilt_rad;
        self.window_count += 1;
        self.tick += 1;
        if self.tick % self.offload_ticks == 0 {
            let n = self.window_count as f64;
            let window_mean = [self.window_sum[0] / n, self.window_sum[1] / n];
            if let Some(offset) = offload_check(&self.fpm, window_mean, self.cfg.offload_threshold) {
                self.mount_offset[0] += offset[0];
                self.mount_offset[1] += offset[1];
                self.fpm.tip_rad -= offset[0];
                self.fpm.tilt_rad -= offset[1];
                self.offloads.push((t, offset));
            }
            self.window_sum = [0.0; 2];
            self.window_count = 0;
        }
        self.applied = self.fpm.command();

        TrackingRecord {
            t,
            raw_error: [frame.cx_rad, frame.cy_rad],
            fpm_command: self.fpm.command(),
            residual,
            lock: self.lock.locked(),
            offload_offset: self.mount_offset,
            valid: frame.valid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingTelemetry {
    pub records: Vec<TrackingRecord>,
    pub saturated_ticks: u64,
    /// Saturation exceeded 10% of ticks.
    pub degraded: bool,
}

impl TrackingTelemetry {
    /// Per-axis residual RMS over records `from..`.
    pub fn residual_rms(&self, from: usize) -> [f64; 2] {
        let tail = &self.records[from.min(self.records.len())..];
        let x: Vec<f64> = tail.iter().map(|r| r.residual[0]).collect();
        let y: Vec<f64> = tail.iter().map(|r| r.residual[1]).collect();
        [rms(&x), rms(&y)]
    }

    pub fn first_lock(&self) -> Option<usize> {
        self.records.iter().position(|r| r.lock)
    }

    /// Fraction of ticks after first lock during which lock is asserted.
    pub fn post_acquisition_lock_fraction(&self) -> f64 {
        match self.first_lock() {
            None => 0.0,
            Some(i) => {
                let tail = &self.records[i..];
                tail.iter().filter(|r| r.lock).count() as f64 / tail.len() as f64
            }
        }
    }

    pub fn mean_command(&self) -> [f64; 2] {
        let x: Vec<f64> = self.records.iter().map(|r| r.fpm_command[0]).collect();
        let y: Vec<f64> = self.records.iter().map(|r| r.fpm_command[1]).collect();
        [mean(&x), mean(&y)]
    }
}

/// Runs the loop over a disturbance series sampled at the control rate.
pub fn simulate_tracking(
    jitter: &JitterSeries,
    cfg: &TrackingConfig,
    fov_rad: f64,
    seed: u64,
) -> Result<TrackingTelemetry> {
    if (jitter.rate_hz - cfg.gains.rate_hz).abs() > 1e-9 * cfg.gains.rate_hz {
        return Err(Error::Precondition(format!(
            "jitter sampled at {} Hz but the loop runs at {} Hz",
            jitter.rate_hz, cfg.gains.rate_hz
        )));
    }
    let mut lp = TrackingLoop::new(*cfg, fov_rad, seed)?;
    let records: Vec<TrackingRecord> = jitter
        .tip_rad
        .iter()
        .zip(&jitter.tilt_rad)
        .map(|(&x, &y)| lp.step([x, y], 1.0))
        .collect();
    let saturated_ticks = lp.saturated_ticks();
    let degraded = saturated_ticks as f64 > DEGRADED_SATURATION_FRACTION * records.len() as f64;
    Ok(TrackingTelemetry {
        records,
        saturated_ticks,
        degraded,
    })
}
