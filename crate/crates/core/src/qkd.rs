//! BB84 polarization receiver: filter stages, four-detector counting in the
//! H/V and D/A bases, sifting against the transmitter log and QBER.
//!
//! Counting is Poisson per symbol slot with a passive 50/50 basis split.
//! Detector dead time, afterpulsing and timing jitter are not modeled.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::ephemeris::{PassEphemeris, PassSample};
use crate::error::{Error, Result};
use crate::frontend::fiber_coupling_efficiency;
use crate::polarization::{
    closed_loop_step, polarization_azimuth, solve_compensation, JonesMatrix, JonesVector, WaveplateSchedule,
    WaveplateSet,
};

const PLANCK: f64 = 6.626_070_15e-34;
const SPEED_OF_LIGHT: f64 = 2.997_924_58e8;

/// QKD band accepted by the receiver, nm (inclusive).
pub const QKD_BAND_NM: (f64, f64) = (780.0, 900.0);
/// Half width given to custom filters, nm.
pub const CUSTOM_HALF_WIDTH_NM: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterId {
    F780,
    F850,
    #[serde(rename = "custom")]
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterStage {
    pub id: FilterId,
    pub center_nm: f64,
    pub half_width_nm: f64,
}

impl FilterStage {
    pub const F780: FilterStage = FilterStage {
        id: FilterId::F780,
        center_nm: 780.0,
        half_width_nm: 10.0,
    };
    pub const F850: FilterStage = FilterStage {
        id: FilterId::F850,
        center_nm: 850.0,
        half_width_nm: 3.0,
    };

    pub fn passes(&self, lambda_nm: f64) -> bool {
        (lambda_nm - self.center_nm).abs() <= self.half_width_nm
    }

    pub fn width_nm(&self) -> f64 {
        2.0 * self.half_width_nm
    }
}

/// Default stages whose passband contains `lambda_nm` win (nearest centre
/// first); any other wavelength inside the QKD band gets a custom stage.
pub fn select_filter(lambda_nm: f64) -> Result<FilterStage> {
    let defaults = [FilterStage::F780, FilterStage::F850];
    if let Some(f) = defaults
        .iter()
        .filter(|f| f.passes(lambda_nm))
        .min_by(|a, b| {
            (a.center_nm - lambda_nm)
                .abs()
                .partial_cmp(&(b.center_nm - lambda_nm).abs())
                .unwrap()
        })
    {
        return Ok(*f);
    }
    if (QKD_BAND_NM.0..=QKD_BAND_NM.1).contains(&lambda_nm) {
        return Ok(FilterStage {
            id: FilterId::Custom,
            center_nm: lambda_nm,
            half_width_nm: CUSTOM_HALF_WIDTH_NM,
        });
    }
    Err(Error::UnsupportedWavelength {
        lambda_nm,
        reason: "outside the 780-900 nm QKD band".into(),
    })
}

/// Background photon rate from diffuse sky light at the aperture, photons/s.
///
/// `sky_radiance` is spectral radiance in W·m⁻²·sr⁻¹·nm⁻¹. The field stop is
/// a cone of full angle `fov_rad` and the aperture a disc of diameter
/// `aperture_m`, so
/// `rate = (π²/16)·L·(2·half_width)·fov²·D² / (h·c/λ)`.
pub fn background_rate(sky_radiance: f64, filter: &FilterStage, fov_rad: f64, aperture_m: f64) -> f64 {
    let photon_energy = PLANCK * SPEED_OF_LIGHT / (filter.center_nm * 1e-9);
    let etendue = std::f64::consts::PI.powi(2) / 16.0 * fov_rad.powi(2) * aperture_m.powi(2);
    sky_radiance * filter.width_nm() * etendue / photon_energy
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorModel {
    pub efficiency: f64,
    pub dark_cps: f64,
}

impl Default for DetectorModel {
    fn default() -> Self {
        Self {
            efficiency: 0.6,
            dark_cps: 100.0,
        }
    }
}

impl DetectorModel {
    pub fn disabled() -> Self {
        Self {
            efficiency: 0.0,
            dark_cps: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.efficiency) || !(self.dark_cps >= 0.0) {
            return Err(Error::Config(format!(
                "detector efficiency {} must lie in [0, 1] and dark rate {} be non-negative",
                self.efficiency, self.dark_cps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    Rectilinear,
    Diagonal,
}

/// Detector order `[H, V, D, A]`.
pub const DETECTOR_STATES: [fn() -> JonesVector; 4] = [
    JonesVector::horizontal,
    JonesVector::vertical,
    JonesVector::diagonal,
    JonesVector::antidiagonal,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QkdCounts {
    pub h: u64,
    pub v: u64,
    pub d: u64,
    pub a: u64,
}

impl QkdCounts {
    pub fn total(&self) -> u64 {
        self.h + self.v + self.d + self.a
    }

    pub fn as_array(&self) -> [u64; 4] {
        [self.h, self.v, self.d, self.a]
    }
}

/// Expected counts `[H, V, D, A]` in a window of `window_s`.
pub fn expected_counts(
    state: &JonesVector,
    signal_rate_cps: f64,
    background_cps: f64,
    detectors: &DetectorModel,
    window_s: f64,
) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (k, det) in DETECTOR_STATES.iter().enumerate() {
        let p = det().overlap(state);
        out[k] = window_s
            * (detectors.efficiency * (signal_rate_cps * p / 2.0 + background_cps / 4.0) + detectors.dark_cps);
    }
    out
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive finite mean").sample(rng) as u64
}

pub fn simulate_detection<R: Rng + ?Sized>(
    state: &JonesVector,
    signal_rate_cps: f64,
    background_cps: f64,
    detectors: &DetectorModel,
    window_s: f64,
    rng: &mut R,
) -> QkdCounts {
    let m = expected_counts(state, signal_rate_cps, background_cps, detectors, window_s);
    QkdCounts {
        h: poisson(m[0], rng),
        v: poisson(m[1], rng),
        d: poisson(m[2], rng),
        a: poisson(m[3], rng),
    }
}

/// One transmitted BB84 symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Symbol {
    pub basis: Basis,
    pub bit: bool,
}

impl Symbol {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            basis: if rng.random::<bool>() { Basis::Diagonal } else { Basis::Rectilinear },
            bit: rng.random(),
        }
    }

    /// Sent polarization: H/V carry 0/1 in the rectilinear basis, D/A in the diagonal.
    pub fn state(&self) -> JonesVector {
        match (self.basis, self.bit) {
            (Basis::Rectilinear, false) => JonesVector::horizontal(),
            (Basis::Rectilinear, true) => JonesVector::vertical(),
            (Basis::Diagonal, false) => JonesVector::diagonal(),
            (Basis::Diagonal, true) => JonesVector::antidiagonal(),
        }
    }
}

/// Counts collected while one symbol was on air.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotCounts {
    pub sent: Symbol,
    pub counts: QkdCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionEntry {
    pub t: f64,
    pub sifted_count: u64,
    pub error_count: u64,
    /// `None` when nothing was sifted.
    pub qber: Option<f64>,
    pub background_fraction: f64,
    /// Raw detector counts over the period.
    #[serde(default)]
    pub counts: QkdCounts,
}

/// Sifts `slots` against the transmitter log and estimates the QBER.
///
/// `background_fraction` is left at zero; [`QkdReceiver`] fills it from
/// the expected rates.
pub fn estimate_qber(t: f64, slots: &[SlotCounts]) -> SessionEntry {
    let (mut sifted, mut errors) = (0u64, 0u64);
    let mut counts = QkdCounts::default();
    for s in slots {
        let c = &s.counts;
        counts.h += c.h;
        counts.v += c.v;
        counts.d += c.d;
        counts.a += c.a;
        let (zero, one) = match s.sent.basis {
            Basis::Rectilinear => (c.h, c.v),
            Basis::Diagonal => (c.d, c.a),
        };
        sifted += zero + one;
        errors += if s.sent.bit { zero } else { one };
    }
    SessionEntry {
        t,
        sifted_count: sifted,
        error_count: errors,
        qber: (sifted > 0).then(|| errors as f64 / sifted as f64),
        background_fraction: 0.0,
        counts,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMode {
    OpenLoop,
    #[default]
    ClosedLoop,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct QkdConfig {
    pub lambda_nm: f64,
    /// Photon rate at the receiver aperture, before detector efficiency.
    pub signal_rate_cps: f64,
    pub detectors: DetectorModel,
    /// Sky spectral radiance, W·m⁻²·sr⁻¹·nm⁻¹.
    pub sky_radiance: f64,
    /// Duration of one transmitted symbol slot, s.
    pub slot_s: f64,
    /// Statistics integration period, s.
    pub report_period_s: f64,
    /// Azimuth measurement noise, degrees RMS.
    pub azimuth_noise_deg: f64,
    pub closed_loop_gain: f64,
    /// Waveplate slew limit, °/s.
    pub waveplate_rate_dps: f64,
    /// Fixed azimuth of the beacon polarization relative to the QKD `H` axis.
    pub beacon_base_offset_deg: f64,
}

impl Default for QkdConfig {
    fn default() -> Self {
        Self {
            lambda_nm: 850.0,
            signal_rate_cps: 2.0e5,
            detectors: DetectorModel::default(),
            sky_radiance: 6.0e-8,
            slot_s: 0.01,
            report_period_s: 1.0,
            azimuth_noise_deg: 0.05,
            closed_loop_gain: 0.8,
            waveplate_rate_dps: 180.0,
            beacon_base_offset_deg: 0.0,
        }
    }
}

impl QkdConfig {
    pub fn validate(&self) -> Result<()> {
        select_filter(self.lambda_nm)?;
        self.detectors.validate()?;
        if !self.beacon_base_offset_deg.is_finite() {
            return Err(Error::Config("beacon base offset must be finite".into()));
        }
        if !(self.signal_rate_cps >= 0.0 && self.sky_radiance >= 0.0 && self.azimuth_noise_deg >= 0.0) {
            return Err(Error::Config("QKD rates and noise must be non-negative".into()));
        }
        if !(self.slot_s > 0.0 && self.report_period_s >= self.slot_s) {
            return Err(Error::Config("symbol slot must be positive and no longer than the report period".into()));
        }
        if !(self.closed_loop_gain > 0.0 && self.closed_loop_gain <= 1.0) {
            return Err(Error::Config(format!("closed-loop gain {} outside (0, 1]", self.closed_loop_gain)));
        }
        if !(self.waveplate_rate_dps > 0.0) {
            return Err(Error::Config("waveplate rate limit must be positive".into()));
        }
        Ok(())
    }

    pub fn filter(&self) -> Result<FilterStage> {
        select_filter(self.lambda_nm)
    }
}

/// Downlink polarization channel: a fixed unitary after the frame rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelModel {
    pub static_part: JonesMatrix,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self {
            static_part: JonesMatrix::identity(),
        }
    }
}

impl ChannelModel {
    pub fn at(&self, sample: &PassSample) -> JonesMatrix {
        self.static_part * JonesMatrix::rotation(sample.frame_rotation_deg)
    }

    pub fn schedule(&self, pass: &PassEphemeris) -> Result<WaveplateSchedule> {
        WaveplateSchedule::from_channels(pass.samples.iter().map(|s| (s.t, self.at(s))))
    }
}

/// Drives the waveplates at the slow tick according to the correction mode.
#[derive(Debug, Clone)]
pub struct PolarizationCorrector {
    mode: CorrectionMode,
    set: WaveplateSet,
    schedule: Option<WaveplateSchedule>,
    gain: f64,
    noise_deg: f64,
    rate_dps: f64,
    beacon: JonesVector,
    reference_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionStep {
    pub set: WaveplateSet,
    /// Azimuth reported by the polarization detectors, if usable.
    pub measured_azimuth_deg: Option<f64>,
    /// Angle between the delivered and the intended reference axis.
    pub misalignment_deg: f64,
}

impl PolarizationCorrector {
    /// `initial_channel` is the calibrated channel at the start of the pass;
    /// `schedule` is required for open-loop mode.
    pub fn new(
        mode: CorrectionMode,
        initial_channel: &JonesMatrix,
        schedule: Option<WaveplateSchedule>,
        cfg: &QkdConfig,
    ) -> Result<Self> {
        let set = match mode {
            CorrectionMode::Off => WaveplateSet::default(),
            CorrectionMode::ClosedLoop => solve_compensation(initial_channel)?,
            CorrectionMode::OpenLoop => schedule
                .as_ref()
                .and_then(|s| s.at(f64::NEG_INFINITY))
                .ok_or_else(|| Error::Config("open-loop correction needs a waveplate schedule".into()))?,
        };
        Ok(Self {
            mode,
            set,
            schedule,
            gain: cfg.closed_loop_gain,
            noise_deg: cfg.azimuth_noise_deg,
            rate_dps: cfg.waveplate_rate_dps,
            beacon: JonesVector::linear(cfg.beacon_base_offset_deg),
            reference_deg: cfg.beacon_base_offset_deg,
        })
    }

    pub fn mode(&self) -> CorrectionMode {
        self.mode
    }

    pub fn set(&self) -> WaveplateSet {
        self.set
    }

    pub fn set_gain(&mut self, gain: f64) {
        self.gain = gain;
    }

    /// Switches mode without moving the plates.
    pub fn set_mode(&mut self, mode: CorrectionMode) {
        self.mode = mode;
    }

    /// One slow tick of length `dt` against the current `channel`.
    pub fn tick<R: Rng + ?Sized>(&mut self, t: f64, dt: f64, channel: &JonesMatrix, rng: &mut R) -> Result<CorrectionStep> {
        let max_step = self.rate_dps * dt;
        let noise: f64 = rng.sample::<f64, _>(StandardNormal) * self.noise_deg;
        let measured = polarization_azimuth(&(self.set.composite() * *channel).apply(&self.beacon))
            .ok()
            .map(|psi| psi + noise);
        let target = match self.mode {
            CorrectionMode::Off => WaveplateSet::default(),
            CorrectionMode::OpenLoop => self
                .schedule
                .as_ref()
                .and_then(|s| s.at(t))
                .unwrap_or(self.set),
            CorrectionMode::ClosedLoop => match measured {
                Some(psi) => closed_loop_step(psi, self.reference_deg, &self.set, self.gain)?,
                None => self.set,
            },
        };
        self.set = self.set.step_toward(&target, max_step);
        Ok(CorrectionStep {
            set: self.set,
            measured_azimuth_deg: measured,
            misalignment_deg: misalignment_deg(&(self.set.composite() * *channel)),
        })
    }
}

/// Angle between `H` and its image under `m`, degrees.
pub fn misalignment_deg(m: &JonesMatrix) -> f64 {
    let out = m.apply(&JonesVector::horizontal());
    out.overlap(&JonesVector::horizontal()).clamp(0.0, 1.0).sqrt().acos().to_degrees()
}

/// Accumulates symbol slots and reports sifted statistics once per period.
#[derive(Debug, Clone)]
pub struct QkdReceiver {
    cfg: QkdConfig,
    background_cps: f64,
    slots: Vec<SlotCounts>,
    expected_total: f64,
    expected_noise: f64,
    period_start: f64,
    carry: f64,
}

impl QkdReceiver {
    pub fn new(cfg: QkdConfig, fov_rad: f64, aperture_m: f64) -> Result<Self> {
        cfg.validate()?;
        let filter = cfg.filter()?;
        Ok(Self {
            background_cps: background_rate(cfg.sky_radiance, &filter, fov_rad, aperture_m),
            cfg,
            slots: Vec::new(),
            expected_total: 0.0,
            expected_noise: 0.0,
            period_start: 0.0,
            carry: 0.0,
        })
    }

    pub fn background_cps(&self) -> f64 {
        self.background_cps
    }

    pub fn config(&self) -> &QkdConfig {
        &self.cfg
    }

    /// Starts a fresh reporting period at `t`, discarding partial data.
    pub fn restart(&mut self, t: f64) {
        self.slots.clear();
        self.expected_total = 0.0;
        self.expected_noise = 0.0;
        self.period_start = t;
        self.carry = 0.0;
    }

    /// Integrates `dt` seconds ending at `t_end` through the link `link`
    /// (channel followed by compensator) with pointing-loss factor
    /// `coupling`. Returns a statistics entry whenever a period completes.
    pub fn integrate<R: Rng + ?Sized>(
        &mut self,
        t_end: f64,
        dt: f64,
        link: &JonesMatrix,
        coupling: f64,
        rng: &mut R,
    ) -> Option<SessionEntry> {
        let signal = self.cfg.signal_rate_cps * coupling;
        let det = self.cfg.detectors;
        self.carry += dt;
        // slot count rounded so float accumulation cannot drop a slot
        let n = ((self.carry / self.cfg.slot_s) + 1e-9).floor() as usize;
        self.carry -= n as f64 * self.cfg.slot_s;
        for _ in 0..n {
            let sent = Symbol::random(rng);
            let state = link.apply(&sent.state());
            let counts = simulate_detection(&state, signal, self.background_cps, &det, self.cfg.slot_s, rng);
            self.slots.push(SlotCounts { sent, counts });
            self.expected_total +=
                self.cfg.slot_s * (det.efficiency * (signal + self.background_cps) + 4.0 * det.dark_cps);
            self.expected_noise += self.cfg.slot_s * (det.efficiency * self.background_cps + 4.0 * det.dark_cps);
        }
        if t_end - self.period_start + 1e-9 < self.cfg.report_period_s {
            return None;
        }
        let mut entry = estimate_qber(t_end, &self.slots);
        entry.background_fraction = if self.expected_total > 0.0 {
            self.expected_noise / self.expected_total
        } else {
            0.0
        };
        self.restart(t_end);
        Some(entry)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SessionStats {
    pub entries: Vec<SessionEntry>,
}

impl SessionStats {
    /// Fraction of defined entries with QBER strictly below `limit`; undefined entries count as failures.
    pub fn fraction_below(&self, limit: f64) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        let ok = self.entries.iter().filter(|e| e.qber.is_some_and(|q| q < limit)).count();
        ok as f64 / self.entries.len() as f64
    }

    pub fn max_qber(&self) -> Option<f64> {
        self.entries.iter().filter_map(|e| e.qber).reduce(f64::max)
    }
}

/// Session-level inputs besides the QKD configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionSetup {
    pub channel: ChannelModel,
    pub mode: CorrectionMode,
    pub fov_rad: f64,
    pub aperture_m: f64,
    /// Tracking residual feeding the Gaussian pointing loss, rad RMS.
    pub pointing_rms_rad: f64,
    /// Slow-tick rate, Hz.
    pub tick_hz: f64,
    pub seed: u64,
}

/// Runs a QKD session over the whole pass.
pub fn run_session(pass: &PassEphemeris, setup: &SessionSetup, cfg: &QkdConfig) -> Result<SessionStats> {
    if !(setup.tick_hz > 0.0 && setup.fov_rad > 0.0) {
        return Err(Error::Config("tick rate and field of view must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let mut rx = QkdReceiver::new(*cfg, setup.fov_rad, setup.aperture_m)?;
    let first = pass.samples.first().ok_or_else(|| Error::Config("empty pass".into()))?;
    let schedule = match setup.mode {
        CorrectionMode::OpenLoop => Some(setup.channel.schedule(pass)?),
        _ => None,
    };
    let mut corrector = PolarizationCorrector::new(setup.mode, &setup.channel.at(first), schedule, cfg)?;
    let coupling = fiber_coupling_efficiency(setup.pointing_rms_rad, setup.fov_rad / 2.0);
    let dt = 1.0 / setup.tick_hz;
    let ticks = (pass.duration() * setup.tick_hz).floor() as usize;
    let mut stats = SessionStats::default();
    rx.restart(first.t);
    for k in 1..=ticks {
        let t = first.t + k as f64 * dt;
        let channel = setup.channel.at(&pass.sample_at(t));
        let link = corrector.set().composite() * channel;
        if let Some(e) = rx.integrate(t, dt, &link, coupling, &mut rng) {
            stats.entries.push(e);
        }
        corrector.tick(t, dt, &channel, &mut rng)?;
    }
    Ok(stats)
}
