//! Canned functional checks of the whole station.
//!
//! * (a) visible-band tracking under benign seeing
//! * (b) QKD-band polarization correction and QBER under a rotating frame
//! * (c) SWIR tracking under strong turbulence with polarization azimuth
//!   measured on the beacon channel

use std::fmt;

use ogs_core::ephemeris::generate_pass;
use ogs_core::numeric::axis_difference;
use ogs_core::qkd::{run_session, ChannelModel, CorrectionMode, DetectorModel, QkdConfig, SessionSetup};
use ogs_core::turbulence::{tilt_sigma, TurbulenceParams};
use ogs_bus::topics;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::pass::simulate;
use crate::scenario::Scenario;

/// Closed-loop residual RMS allowed, as a fraction of the open-loop RMS.
pub const MAX_RESIDUAL_RATIO: f64 = 0.30;
/// Required share of post-acquisition time with lock asserted.
pub const MIN_LOCK_FRACTION: f64 = 0.99;
/// Allowed relative deviation of the simulated tilt from the analytic value.
pub const TILT_TOLERANCE: f64 = 0.10;
pub const QBER_LIMIT: f64 = 0.02;
pub const MIN_QBER_FRACTION: f64 = 0.95;
/// QBER the uncorrected pass must exceed somewhere.
pub const UNCORRECTED_QBER: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Case {
    A,
    B,
    C,
}

impl Case {
    pub const ALL: [Case; 3] = [Case::A, Case::B, Case::C];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "a" => Some(Case::A),
            "b" => Some(Case::B),
            "c" => Some(Case::C),
            _ => None,
        }
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Case::A => "a",
            Case::B => "b",
            Case::C => "c",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Options {
    pub only: Option<Case>,
    /// Forces both loop gains to zero.
    pub zero_gains: bool,
    /// Zero detector efficiency and dark rate.
    pub disable_detectors: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub case: Case,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn push(&mut self, case: Case, name: &str, passed: bool, detail: String) {
        self.checks.push(Check {
            case,
            name: name.to_string(),
            passed,
            detail,
        });
    }
}

pub fn run(opts: &Options) -> Report {
    let mut report = Report::default();
    for case in Case::ALL {
        if opts.only.is_some_and(|o| o != case) {
            continue;
        }
        match case {
            Case::A => tracking_case(&mut report, case, opts, TurbulenceParams { r0_550_m: 0.046, wind_mps: 11.0, seed: 0 }, 650.0, 30.0),
            Case::B => qkd_case(&mut report, opts),
            Case::C => tracking_case(&mut report, case, opts, TurbulenceParams::worst_case(), 1550.0, 60.0),
        }
    }
    report
}

fn tracking_case(report: &mut Report, case: Case, opts: &Options, turb: TurbulenceParams, beacon_nm: f64, duration_s: f64) {
    let mut sc = Scenario {
        turbulence: turb,
        seed: opts.seed,
        ..Scenario::default()
    };
    sc.mission.downlink_beacon_nm = beacon_nm;
    sc.timing.duration_s = Some(duration_s);
    if case == Case::C {
        sc.mission.correction_mode = CorrectionMode::Off;
    }
    if opts.zero_gains {
        sc.mission.gains.kp = 0.0;
        sc.mission.gains.ki = 0.0;
    }
    let (r, log) = match simulate(&sc) {
        Ok(x) => x,
        Err(e) => {
            report.push(case, "scenario runs", false, e.to_string());
            return;
        }
    };

    let lambda = beacon_nm * 1e-9;
    let sigma = tilt_sigma(sc.station.aperture_m, turb.r0_at(lambda), lambda);
    let worst_dev = r
        .jitter_rms
        .iter()
        .map(|s| (s / sigma - 1.0).abs())
        .fold(if r.first_lock_t.is_some() { 0.0 } else { f64::INFINITY }, f64::max);
    report.push(
        case,
        "open-loop tilt matches analytic sigma",
        worst_dev <= TILT_TOLERANCE,
        format!(
            "simulated [{:.3}, {:.3}] urad vs {:.3} urad",
            r.jitter_rms[0] * 1e6,
            r.jitter_rms[1] * 1e6,
            sigma * 1e6
        ),
    );

    let ratio = [r.residual_rms[0] / r.jitter_rms[0], r.residual_rms[1] / r.jitter_rms[1]];
    report.push(
        case,
        "closed-loop residual",
        ratio.iter().all(|x| *x <= MAX_RESIDUAL_RATIO),
        format!("residual/open-loop = [{:.3}, {:.3}], limit {MAX_RESIDUAL_RATIO}", ratio[0], ratio[1]),
    );

    report.push(
        case,
        "lock",
        r.first_lock_t.is_some() && r.lock_fraction >= MIN_LOCK_FRACTION,
        match r.first_lock_t {
            Some(t) => format!("first lock at {t:.3} s, locked {:.4} of the time after", r.lock_fraction),
            None => "never locked".into(),
        },
    );

    if case == Case::C {
        // uncompensated channel: the measured azimuth follows the frame rotation
        let noise = sc.qkd.azimuth_noise_deg;
        let mut worst: Option<f64> = None;
        for env in log.iter().filter(|e| e.topic == topics::POL_TELEMETRY) {
            let p = &env.payload;
            let (Some(psi), Some(rho)) = (
                p.get("azimuth_deg").and_then(Value::as_f64),
                p.get("frame_rotation_deg").and_then(Value::as_f64),
            ) else {
                continue;
            };
            let d = axis_difference(psi, rho).abs();
            worst = Some(worst.map_or(d, |w: f64| w.max(d)));
        }
        let limit = 6.0 * noise;
        report.push(
            case,
            "azimuth measurement follows frame rotation",
            worst.is_some_and(|w| w <= limit),
            match worst {
                Some(w) => format!("worst deviation {w:.3} deg, limit {limit:.3} deg"),
                None => "no azimuth reports".into(),
            },
        );
    }
}

fn qkd_case(report: &mut Report, opts: &Options) {
    let sc = Scenario {
        seed: opts.seed,
        ..Scenario::default()
    };
    let mut cfg: QkdConfig = sc.qkd_config();
    if opts.disable_detectors {
        cfg.detectors = DetectorModel::disabled();
    }
    let pass = match generate_pass(&sc.site, &sc.orbit, sc.timing.ephemeris_step_s) {
        Ok(p) => p,
        Err(e) => {
            report.push(Case::B, "pass geometry", false, e.to_string());
            return;
        }
    };
    let fov = ogs_core::frontend::compute_qkd_fov(&sc.turbulence, cfg.lambda_nm);
    let setup = |mode| SessionSetup {
        channel: ChannelModel::default(),
        mode,
        fov_rad: fov,
        aperture_m: sc.station.aperture_m,
        pointing_rms_rad: 2e-6,
        tick_hz: sc.timing.slow_tick_hz,
        seed: opts.seed,
    };

    match run_session(&pass, &setup(CorrectionMode::ClosedLoop), &cfg) {
        Ok(stats) => {
            let undefined = stats.entries.iter().filter(|e| e.qber.is_none()).count();
            let frac = stats.fraction_below(QBER_LIMIT);
            report.push(
                Case::B,
                "closed-loop QBER",
                frac >= MIN_QBER_FRACTION,
                if undefined == stats.entries.len() {
                    format!("QBER undefined in all {undefined} reports: nothing sifted")
                } else {
                    format!(
                        "{:.3} of reports below {QBER_LIMIT}, {undefined} undefined, max {:.4}",
                        frac,
                        stats.max_qber().unwrap_or(f64::NAN)
                    )
                },
            );
        }
        Err(e) => report.push(Case::B, "closed-loop QBER", false, e.to_string()),
    }

    match run_session(&pass, &setup(CorrectionMode::Off), &cfg) {
        Ok(stats) => {
            let max = stats.max_qber();
            report.push(
                Case::B,
                "uncorrected frame rotation is visible",
                max.is_some_and(|q| q > UNCORRECTED_QBER),
                match max {
                    Some(q) => format!("max QBER without correction {q:.3}, must exceed {UNCORRECTED_QBER}"),
                    None => "QBER undefined: nothing sifted".into(),
                },
            );
        }
        Err(e) => report.push(Case::B, "uncorrected frame rotation is visible", false, e.to_string()),
    }
}
