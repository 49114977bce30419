//! Scenario files: everything needed to fly one simulated pass.
//!
//! Every section is optional and falls back to the station defaults, so
//! `{"orbit": {"altitude_km": 500}, "seed": 1}` is a complete scenario.
//! Unknown and duplicated keys are rejected with the offending field path.

use ogs_core::beacon::{validate_beacon, BeaconConfig};
use ogs_core::ephemeris::{GroundSite, OrbitSpec};
use ogs_core::frontend::{route_wavelength, OpticalChannel, APERTURE_M};
use ogs_core::qkd::{select_filter, CorrectionMode, QkdConfig};
use ogs_core::tracking::{
    CentroidSensor, LockRule, LoopGains, TrackingConfig, DEFAULT_FPM_LIMIT_RAD,
};
use ogs_core::turbulence::TurbulenceParams;
use ogs_bus::topics::{lookup, TopicKind};
use schemars::gen::SchemaSettings;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{ControllerError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub site: GroundSite,
    pub orbit: OrbitSpec,
    /// Turbulence along the line of sight during the pass.
    pub turbulence: TurbulenceParams,
    pub station: StationConfig,
    pub mission: MissionProfile,
    /// Receiver model; `lambda_nm` is taken from `mission.qkd_lambda_nm`.
    pub qkd: QkdConfig,
    pub timing: Timing,
    pub faults: Faults,
    /// Commands issued over the bus during the pass.
    pub commands: Vec<ScheduledCommand>,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            site: GroundSite::default(),
            orbit: OrbitSpec::default(),
            turbulence: TurbulenceParams::worst_case(),
            station: StationConfig::default(),
            mission: MissionProfile::default(),
            qkd: QkdConfig::default(),
            timing: Timing::default(),
            faults: Faults::default(),
            commands: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct StationConfig {
    pub aperture_m: f64,
    /// QKD field stop, rad; sized from the worst-case seeing when absent.
    pub qkd_fov_rad: Option<f64>,
    pub sensor: CentroidSensor,
    pub fpm_limit_rad: f64,
    pub lock: LockRule,
    pub offload_threshold: f64,
    pub offload_period_s: f64,
    /// Mount pointing error left after coarse acquisition, rad.
    pub pointing_bias_rad: [f64; 2],
    /// Slow mount drift, rad/s.
    pub mount_drift_rad_s: [f64; 2],
    /// Residual transmit/receive misalignment applied to the uplink, rad.
    pub coalign_offset_rad: [f64; 2],
}

impl Default for StationConfig {
    fn default() -> Self {
        let t = TrackingConfig::default();
        Self {
            aperture_m: APERTURE_M,
            qkd_fov_rad: None,
            sensor: t.sensor,
            fpm_limit_rad: DEFAULT_FPM_LIMIT_RAD,
            lock: t.lock,
            offload_threshold: t.offload_threshold,
            offload_period_s: t.offload_period_s,
            pointing_bias_rad: [25e-6, -15e-6],
            mount_drift_rad_s: [2e-6, -1e-6],
            coalign_offset_rad: [0.0, 0.0],
        }
    }
}

/// Static part of the downlink polarization channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ChannelSpec {
    #[default]
    Identity,
    /// A Haar-random unitary drawn from this seed.
    Random(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct MissionProfile {
    pub qkd_lambda_nm: f64,
    pub beacon: BeaconConfig,
    /// Whether the uplink beacon is switched on at pass start.
    pub beacon_enabled: bool,
    pub correction_mode: CorrectionMode,
    pub gains: LoopGains,
    pub point_ahead: bool,
    /// Satellite downlink beacon seen by the tracking sensor, nm.
    pub downlink_beacon_nm: f64,
    pub channel: ChannelSpec,
}

impl Default for MissionProfile {
    fn default() -> Self {
        Self {
            qkd_lambda_nm: 850.0,
            beacon: BeaconConfig::default(),
            beacon_enabled: true,
            correction_mode: CorrectionMode::ClosedLoop,
            gains: LoopGains::default(),
            point_ahead: true,
            downlink_beacon_nm: 1550.0,
            channel: ChannelSpec::Identity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct Timing {
    /// Ephemeris sample spacing, s.
    pub ephemeris_step_s: f64,
    pub slow_tick_hz: f64,
    pub slew_s: f64,
    /// Beacon dwell above threshold before declaring detection, s.
    pub acquisition_delay_s: f64,
    /// Continuous fine lock required before QKD starts, s.
    pub qkd_go_delay_s: f64,
    pub max_reacquisitions: u32,
    /// Truncates the pass, s from rise.
    pub duration_s: Option<f64>,
    /// Start the pass at t = 0 without waiting for a `start_pass` command.
    pub auto_start: bool,
    pub command_timeout_s: f64,
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            ephemeris_step_s: 1.0,
            slow_tick_hz: 10.0,
            slew_s: 5.0,
            acquisition_delay_s: 2.0,
            qkd_go_delay_s: 2.0,
            max_reacquisitions: 3,
            duration_s: None,
            auto_start: true,
            command_timeout_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct Faults {
    /// The satellite beacon never reaches the sensor.
    pub beacon_disabled: bool,
    /// `[start, end)` windows in which the satellite beacon is lost, s.
    pub beacon_dropouts: Vec<[f64; 2]>,
    /// Command topics whose handler is stopped.
    pub stopped_handlers: Vec<String>,
    /// Deliver every scheduled command twice.
    pub duplicate_commands: bool,
}

impl Faults {
    pub fn beacon_visible(&self, t: f64) -> bool {
        !self.beacon_disabled && !self.beacon_dropouts.iter().any(|w| t >= w[0] && t < w[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ScheduledCommand {
    pub t: f64,
    pub topic: String,
    #[serde(default = "empty_object")]
    pub payload: Value,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

impl Scenario {
    /// Cross-checks the sections against each other and the hardware envelopes.
    pub fn validate(&self) -> Result<()> {
        let xref = ControllerError::CrossReference;
        self.site.validate()?;
        self.orbit.validate()?;
        self.turbulence.validate()?;
        self.mission.gains.validate()?;
        select_filter(self.mission.qkd_lambda_nm).map_err(|e| {
            xref(format!(
                "mission.qkd_lambda_nm {} nm has no filter stage: {e}",
                self.mission.qkd_lambda_nm
            ))
        })?;
        validate_beacon(&self.mission.beacon).map_err(|e| xref(format!("mission.beacon: {e}")))?;
        match route_wavelength(self.mission.downlink_beacon_nm) {
            Ok(OpticalChannel::VisNirBeacon | OpticalChannel::SwirBeacon) => {}
            Ok(OpticalChannel::Qkd) => {
                return Err(xref(format!(
                    "mission.downlink_beacon_nm {} nm lands in the QKD channel, not a tracking channel",
                    self.mission.downlink_beacon_nm
                )))
            }
            Err(e) => return Err(xref(format!("mission.downlink_beacon_nm: {e}"))),
        }
        self.tracking_config().validate()?;
        self.qkd_config().validate()?;
        let t = &self.timing;
        if !(t.slow_tick_hz > 0.0 && t.ephemeris_step_s > 0.0) {
            return Err(ControllerError::Scenario {
                path: "timing".into(),
                message: "tick rate and ephemeris step must be positive".into(),
            });
        }
        let ratio = self.mission.gains.rate_hz / t.slow_tick_hz;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(ControllerError::Scenario {
                path: "timing.slow_tick_hz".into(),
                message: format!(
                    "the control rate {} Hz must be an integer multiple of the slow tick",
                    self.mission.gains.rate_hz
                ),
            });
        }
        if !(t.slew_s >= 0.0 && t.acquisition_delay_s >= 0.0 && t.qkd_go_delay_s >= 0.0 && t.command_timeout_s > 0.0) {
            return Err(ControllerError::Scenario {
                path: "timing".into(),
                message: "delays must be non-negative and the command timeout positive".into(),
            });
        }
        if let Some(d) = t.duration_s {
            if !(d > 0.0) {
                return Err(ControllerError::Scenario {
                    path: "timing.duration_s".into(),
                    message: format!("{d} s must be positive"),
                });
            }
        }
        if let Some(fov) = self.station.qkd_fov_rad {
            if !(fov > 0.0) {
                return Err(ControllerError::Scenario {
                    path: "station.qkd_fov_rad".into(),
                    message: format!("{fov} rad must be positive"),
                });
            }
        }
        if !(self.station.aperture_m > 0.0) {
            return Err(ControllerError::Scenario {
                path: "station.aperture_m".into(),
                message: "must be positive".into(),
            });
        }
        for (i, c) in self.commands.iter().enumerate() {
            if lookup(&c.topic).map(|s| s.kind) != Some(TopicKind::Command) {
                return Err(xref(format!("commands[{i}].topic `{}` is not a command topic", c.topic)));
            }
        }
        for (i, topic) in self.faults.stopped_handlers.iter().enumerate() {
            if lookup(topic).map(|s| s.kind) != Some(TopicKind::Command) {
                return Err(xref(format!("faults.stopped_handlers[{i}] `{topic}` is not a command topic")));
            }
        }
        Ok(())
    }

    pub fn tracking_config(&self) -> TrackingConfig {
        TrackingConfig {
            gains: self.mission.gains,
            sensor: self.station.sensor,
            fpm_limit_rad: self.station.fpm_limit_rad,
            lock: self.station.lock,
            offload_threshold: self.station.offload_threshold,
            offload_period_s: self.station.offload_period_s,
        }
    }

    pub fn qkd_config(&self) -> QkdConfig {
        QkdConfig {
            lambda_nm: self.mission.qkd_lambda_nm,
            ..self.qkd
        }
    }
}

/// Parses and validates scenario JSON.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ControllerError::Scenario {
            path: if path == "." { "(root)".into() } else { path },
            message: e.into_inner().to_string(),
        }
    })?;
    scenario.validate()?;
    Ok(scenario)
}

pub fn load_scenario(path: &std::path::Path) -> Result<Scenario> {
    parse_scenario(&std::fs::read_to_string(path)?)
}

/// JSON Schema of the scenario file, with every subschema inlined.
pub fn scenario_schema() -> Value {
    let settings = SchemaSettings::draft07().with(|s| {
        s.inline_subschemas = true;
    });
    let schema = settings.into_generator().into_root_schema_for::<Scenario>();
    serde_json::to_value(schema).expect("schema serializes")
}
