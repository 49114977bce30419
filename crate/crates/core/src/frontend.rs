//! Receiver optical routing: dichroic band split, QKD field stop and the SWIR
//! multimode fiber port.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::turbulence::{scale_r0, seeing_fwhm, TurbulenceParams, R0_REFERENCE_WAVELENGTH_M};

/// Main mirror aperture, m.
pub const APERTURE_M: f64 = 0.8;
/// Telescope focal ratio.
pub const FOCAL_RATIO: f64 = 6.85;
/// Peak data rate of the SWIR multimode fiber port, bit/s.
pub const FIBER_MAX_RATE_BPS: f64 = 2.5e9;
/// Ratio of QKD field of view to the worst-case seeing disk.
pub const QKD_FOV_MARGIN: f64 = 1.5;
/// Overall station acceptance, nm.
pub const STATION_BAND_NM: (f64, f64) = (600.0, 1610.0);
/// Fraction of beacon light sent to the fine acquisition sensor.
pub const DEFAULT_SENSOR_FRACTION: f64 = 0.1;
/// Coupling efficiency above which the fiber link runs at full rate.
pub const DEFAULT_COUPLING_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OpticalChannel {
    Qkd,
    VisNirBeacon,
    SwirBeacon,
}

/// One row of the dichroic band table: `[lower_nm, upper_nm)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub channel: OpticalChannel,
    pub lower_nm: f64,
    pub upper_nm: f64,
}

/// Dichroic band edges. Lower edges inclusive, upper edges exclusive.
pub const BAND_TABLE: [Band; 4] = [
    Band { channel: OpticalChannel::VisNirBeacon, lower_nm: 600.0, upper_nm: 770.0 },
    Band { channel: OpticalChannel::Qkd, lower_nm: 770.0, upper_nm: 903.0 },
    Band { channel: OpticalChannel::VisNirBeacon, lower_nm: 903.0, upper_nm: 1000.0 },
    Band { channel: OpticalChannel::SwirBeacon, lower_nm: 1530.0, upper_nm: 1565.0 },
];

pub fn route_wavelength(lambda_nm: f64) -> Result<OpticalChannel> {
    if !(STATION_BAND_NM.0..=STATION_BAND_NM.1).contains(&lambda_nm) {
        return Err(Error::UnsupportedWavelength {
            lambda_nm,
            reason: "outside the 600-1610 nm station acceptance".into(),
        });
    }
    BAND_TABLE
        .iter()
        .find(|b| lambda_nm >= b.lower_nm && lambda_nm < b.upper_nm)
        .map(|b| b.channel)
        .ok_or_else(|| Error::UnsupportedWavelength {
            lambda_nm,
            reason: "falls between receiver bands".into(),
        })
}

/// QKD field stop: 1.5 × the seeing FWHM at `lambda_nm` for the turbulence given.
///
/// Pass the scenario's worst-case (smallest) r0.
pub fn compute_qkd_fov(turb: &TurbulenceParams, lambda_nm: f64) -> f64 {
    let lambda = lambda_nm * 1e-9;
    let r0 = scale_r0(turb.r0_550_m, R0_REFERENCE_WAVELENGTH_M, lambda);
    QKD_FOV_MARGIN * seeing_fwhm(r0, lambda)
}

/// Gaussian pointing-loss model `exp(−2·(σ/θ_f)²)`.
pub fn fiber_coupling_efficiency(residual_rms_rad: f64, fiber_fov_rad: f64) -> f64 {
    (-2.0 * (residual_rms_rad / fiber_fov_rad).powi(2)).exp()
}

/// Achieved LEO-DTE data rate: full rate when coupling clears the threshold, else zero.
pub fn achieved_data_rate(coupling: f64, threshold: f64) -> f64 {
    if coupling > threshold {
        FIBER_MAX_RATE_BPS
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationOptics {
    pub aperture_m: f64,
    pub focal_ratio: f64,
    pub qkd_fov_rad: f64,
    pub fiber_max_rate_bps: f64,
    pub sensor_fraction: f64,
    pub bands: Vec<Band>,
}

impl StationOptics {
    /// Station optics with the QKD field stop sized for `worst` turbulence at `qkd_lambda_nm`.
    pub fn new(worst: &TurbulenceParams, qkd_lambda_nm: f64) -> Self {
        Self {
            aperture_m: APERTURE_M,
            focal_ratio: FOCAL_RATIO,
            qkd_fov_rad: compute_qkd_fov(worst, qkd_lambda_nm),
            fiber_max_rate_bps: FIBER_MAX_RATE_BPS,
            sensor_fraction: DEFAULT_SENSOR_FRACTION,
            bands: BAND_TABLE.to_vec(),
        }
    }

    pub fn focal_length_m(&self) -> f64 {
        self.aperture_m * self.focal_ratio
    }
}
