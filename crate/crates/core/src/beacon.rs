//! Uplink beacon: configuration envelope, transmit pointing with point-ahead
//! and the Rx/Tx co-alignment estimate from simultaneous star images.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::ephemeris::{point_ahead_angle, PassSample};
use crate::error::{Error, Result};
use crate::numeric::{mean, std_dev};

/// Beacon band, nm (inclusive).
pub const BEACON_BAND_NM: (f64, f64) = (1530.0, 1610.0);
/// Maximum beacon power, W (inclusive).
pub const MAX_BEACON_POWER_W: f64 = 10.0;
/// Minimum number of star pairs for a co-alignment estimate.
pub const MIN_COALIGN_PAIRS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct BeaconConfig {
    pub lambda_nm: f64,
    pub power_w: f64,
    #[serde(default)]
    pub modulated: bool,
}

impl Default for BeaconConfig {
    fn default() -> Self {
        Self {
            lambda_nm: 1550.0,
            power_w: 5.0,
            modulated: false,
        }
    }
}

pub fn validate_beacon(config: &BeaconConfig) -> Result<()> {
    let (lo, hi) = BEACON_BAND_NM;
    if !(lo..=hi).contains(&config.lambda_nm) {
        return Err(Error::UnsupportedWavelength {
            lambda_nm: config.lambda_nm,
            reason: format!("beacon band is {lo}-{hi} nm"),
        });
    }
    if !(config.power_w > 0.0 && config.power_w <= MAX_BEACON_POWER_W) {
        return Err(Error::OverPower {
            power_w: config.power_w,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UplinkPointing {
    pub t: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub point_ahead_rad: f64,
    /// `(cross-elevation, elevation)`, rad.
    pub coalign_offset_rad: [f64; 2],
}

fn line_of_sight(az: f64, el: f64) -> [f64; 3] {
    [az.sin() * el.cos(), az.cos() * el.cos(), el.sin()]
}

fn add_scaled(a: [f64; 3], k: f64, b: [f64; 3]) -> [f64; 3] {
    [a[0] + k * b[0], a[1] + k * b[1], a[2] + k * b[2]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Transmit direction for `sample`.
///
/// The point-ahead lead is applied along the apparent motion of the
/// satellite on the sky; the co-alignment offset is applied along the local
/// cross-elevation and elevation axes. Pass `point_ahead = false` to point
/// at the downlink direction.
pub fn compute_uplink_pointing(sample: &PassSample, coalign_offset_rad: [f64; 2], point_ahead: bool) -> UplinkPointing {
    let az = sample.azimuth_deg.to_radians();
    let el = sample.elevation_deg.to_radians();
    let mut dir = line_of_sight(az, el);

    let pa = if point_ahead { point_ahead_angle(sample) } else { 0.0 };
    let motion = norm(sample.los_rate);
    if pa > 0.0 && motion > 0.0 {
        dir = add_scaled(dir, pa / motion, sample.los_rate);
    }
    let cross_el = [az.cos(), -az.sin(), 0.0];
    let up_el = [-az.sin() * el.sin(), -az.cos() * el.sin(), el.cos()];
    dir = add_scaled(dir, coalign_offset_rad[0], cross_el);
    dir = add_scaled(dir, coalign_offset_rad[1], up_el);

    let (azimuth_deg, elevation_deg) = if dir == line_of_sight(az, el) {
        (sample.azimuth_deg, sample.elevation_deg)
    } else {
        let [e, n, u] = dir;
        (
            e.atan2(n).to_degrees().rem_euclid(360.0),
            u.atan2(e.hypot(n)).to_degrees(),
        )
    };
    UplinkPointing {
        t: sample.t,
        azimuth_deg,
        elevation_deg,
        point_ahead_rad: pa,
        coalign_offset_rad,
    }
}

/// Angle between two pointing directions, rad.
pub fn angular_separation(az1_deg: f64, el1_deg: f64, az2_deg: f64, el2_deg: f64) -> f64 {
    let a = line_of_sight(az1_deg.to_radians(), el1_deg.to_radians());
    let b = line_of_sight(az2_deg.to_radians(), el2_deg.to_radians());
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    norm(cross).atan2(dot)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// One simultaneous star image on the receive and transmit cameras.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StarPair {
    pub rx_rad: [f64; 2],
    pub tx_rad: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoalignEstimate {
    pub offset_rad: [f64; 2],
    /// Standard error per axis.
    pub std_error_rad: [f64; 2],
    pub used: usize,
    pub rejected: usize,
}

/// Mean `rx − tx` offset after a single 3σ outlier-rejection pass about the median.
///
/// `noise_rms_rad` is the per-axis centroid noise if known; otherwise the
/// sample scatter is used.
pub fn coalign_calibrate(pairs: &[StarPair], noise_rms_rad: Option<f64>) -> Result<CoalignEstimate> {
    if pairs.len() < MIN_COALIGN_PAIRS {
        return Err(Error::InsufficientData {
            needed: MIN_COALIGN_PAIRS,
            got: pairs.len(),
        });
    }
    let diffs: Vec<[f64; 2]> = pairs
        .iter()
        .map(|p| [p.rx_rad[0] - p.tx_rad[0], p.rx_rad[1] - p.tx_rad[1]])
        .collect();
    let axis = |d: &[[f64; 2]], k: usize| d.iter().map(|x| x[k]).collect::<Vec<f64>>();
    // rejection is centred on the median so a single wild pair cannot drag
    // the inliers outside the cut
    let centre = [median(axis(&diffs, 0)), median(axis(&diffs, 1))];
    let spread = match noise_rms_rad {
        Some(s) => [s, s],
        None => [std_dev(&axis(&diffs, 0)), std_dev(&axis(&diffs, 1))],
    };
    let kept: Vec<[f64; 2]> = diffs
        .iter()
        .copied()
        .filter(|d| (0..2).all(|k| (d[k] - centre[k]).abs() <= 3.0 * spread[k]))
        .collect();
    if kept.len() < MIN_COALIGN_PAIRS {
        return Err(Error::InsufficientData {
            needed: MIN_COALIGN_PAIRS,
            got: kept.len(),
        });
    }
    let n = kept.len() as f64;
    let mut offset = [0.0; 2];
    let mut std_error = [0.0; 2];
    for k in 0..2 {
        let xs = axis(&kept, k);
        offset[k] = mean(&xs);
        let s = noise_rms_rad.unwrap_or_else(|| std_dev(&xs));
        std_error[k] = s / n.sqrt();
    }
    Ok(CoalignEstimate {
        offset_rad: offset,
        std_error_rad: std_error,
        used: kept.len(),
        rejected: diffs.len() - kept.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ephemeris::{generate_pass, GroundSite, OrbitSpec, PassDirection};

    #[test]
    fn envelope() {
        assert!(validate_beacon(&BeaconConfig { lambda_nm: 1550.0, power_w: 5.0, modulated: false }).is_ok());
        assert!(validate_beacon(&BeaconConfig { lambda_nm: 1550.0, power_w: 10.0, modulated: true }).is_ok());
        assert!(validate_beacon(&BeaconConfig { lambda_nm: 1530.0, power_w: 1.0, modulated: false }).is_ok());
        assert!(validate_beacon(&BeaconConfig { lambda_nm: 1610.0, power_w: 1.0, modulated: false }).is_ok());
        assert!(matches!(
            validate_beacon(&BeaconConfig { lambda_nm: 1550.0, power_w: 12.0, modulated: false }),
            Err(Error::OverPower { .. })
        ));
        assert!(matches!(
            validate_beacon(&BeaconConfig { lambda_nm: 1520.0, power_w: 5.0, modulated: false }),
            Err(Error::UnsupportedWavelength { .. })
        ));
        assert!(validate_beacon(&BeaconConfig { lambda_nm: 1550.0, power_w: 0.0, modulated: false }).is_err());
    }

    fn zenith_sample() -> PassSample {
        let orbit = OrbitSpec { max_elevation_deg: 90.0, ..OrbitSpec::default() };
        *generate_pass(&GroundSite::al_wathba(), &orbit, 1.0).unwrap().culmination()
    }

    #[test]
    fn stationary_target_gets_downlink_direction() {
        let mut s = zenith_sample();
        s.elevation_deg = 45.0;
        s.transverse_velocity_mps = 0.0;
        s.los_rate = [0.0; 3];
        let p = compute_uplink_pointing(&s, [0.0; 2], true);
        assert_eq!((p.azimuth_deg, p.elevation_deg, p.point_ahead_rad), (s.azimuth_deg, 45.0, 0.0));
    }

    #[test]
    fn zenith_point_ahead() {
        let s = zenith_sample();
        let p = compute_uplink_pointing(&s, [0.0; 2], true);
        assert!((p.point_ahead_rad - 50.8e-6).abs() < 0.1e-6);
        let sep = angular_separation(p.azimuth_deg, p.elevation_deg, s.azimuth_deg, s.elevation_deg);
        assert!((sep - p.point_ahead_rad).abs() < 1e-12);
    }

    #[test]
    fn offset_is_additive() {
        let mut s = zenith_sample();
        s.elevation_deg = 40.0;
        let base = compute_uplink_pointing(&s, [0.0; 2], false);
        let shifted = compute_uplink_pointing(&s, [0.0, 20e-6], false);
        assert!((shifted.elevation_deg - base.elevation_deg - 20e-6_f64.to_degrees()).abs() < 1e-12);
        assert!((shifted.azimuth_deg - base.azimuth_deg).abs() < 1e-12);
    }

    #[test]
    fn point_ahead_flips_with_direction() {
        let site = GroundSite::al_wathba();
        let up = generate_pass(&site, &OrbitSpec::default(), 1.0).unwrap();
        let down = generate_pass(
            &site,
            &OrbitSpec { direction: PassDirection::Descending, ..OrbitSpec::default() },
            1.0,
        )
        .unwrap();
        let a = up.culmination();
        let b = down.culmination();
        let pa = compute_uplink_pointing(a, [0.0; 2], true);
        let pb = compute_uplink_pointing(b, [0.0; 2], true);
        let da = pa.azimuth_deg - a.azimuth_deg;
        let db = pb.azimuth_deg - b.azimuth_deg;
        assert!(da.abs() > 1e-6);
        assert!((da + db).abs() < 1e-9 * da.abs().max(1.0));
    }

    #[test]
    fn coalign_examples() {
        let same: Vec<StarPair> = (0..5).map(|i| StarPair { rx_rad: [i as f64, 0.0], tx_rad: [i as f64, 0.0] }).collect();
        assert_eq!(coalign_calibrate(&same, None).unwrap().offset_rad, [0.0, 0.0]);
        let biased: Vec<StarPair> = (0..8)
            .map(|i| StarPair { rx_rad: [i as f64 * 1e-5 + 20e-6, 20e-6], tx_rad: [i as f64 * 1e-5, 0.0] })
            .collect();
        let est = coalign_calibrate(&biased, None).unwrap();
        assert!((est.offset_rad[1] - 20e-6).abs() < 1e-18);
        assert!(matches!(coalign_calibrate(&same[..4], None), Err(Error::InsufficientData { needed: 5, got: 4 })));
    }

    #[test]
    fn coalign_rejects_one_outlier() {
        let mut pairs: Vec<StarPair> = (0..30)
            .map(|i| StarPair { rx_rad: [1e-6 * ((i % 3) as f64 - 1.0), 0.0], tx_rad: [0.0; 2] })
            .collect();
        pairs.push(StarPair { rx_rad: [1e-3, 0.0], tx_rad: [0.0; 2] });
        let est = coalign_calibrate(&pairs, Some(1e-6)).unwrap();
        assert_eq!(est.rejected, 1);
        assert!(est.offset_rad[0].abs() < 1e-7);
    }
}
