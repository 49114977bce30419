//! Satellite pass geometry for a ground site.
//!
//! The orbit is circular two-body motion around a spherical Earth (no J2, no
//! refraction, no Earth rotation). A pass is parameterized by its maximum
//! elevation rather than by orbital elements: the ground track is a great
//! circle whose closest approach to the site subtends the Earth-central angle
//! that produces that culmination elevation.
//!
//! Geometry is computed in the site's local east/north/up frame with the Earth
//! center at `-R⊕·up`. Passes culminate due east of the site; ascending passes
//! move northward, descending ones southward, which makes the two directions
//! mirror images of each other.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::integrate_adaptive;

/// Standard gravitational parameter of the Earth, m³/s².
pub const MU_EARTH: f64 = 3.986e14;
/// Mean Earth radius, m.
pub const R_EARTH: f64 = 6_371_000.0;
/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 2.997_924_58e8;
/// Default elevation mask, degrees.
pub const DEFAULT_HORIZON_MASK_DEG: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct GroundSite {
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    pub altitude_m: f64,
    #[serde(default = "default_mask")]
    pub horizon_mask_deg: f64,
}

fn default_mask() -> f64 {
    DEFAULT_HORIZON_MASK_DEG
}

impl GroundSite {
    /// Al Wathba, Abu Dhabi: 24°11′ N, 54°41′ E, about 70 m above sea level.
    pub fn al_wathba() -> Self {
        Self {
            latitude_deg: 24.0 + 11.0 / 60.0,
            longitude_deg: 54.0 + 41.0 / 60.0,
            altitude_m: 70.0,
            horizon_mask_deg: DEFAULT_HORIZON_MASK_DEG,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.latitude_deg.abs() <= 90.0) {
            return Err(Error::Config(format!(
                "site latitude {} deg outside [-90, 90]",
                self.latitude_deg
            )));
        }
        if !(self.longitude_deg.abs() <= 180.0) {
            return Err(Error::Config(format!(
                "site longitude {} deg outside [-180, 180]",
                self.longitude_deg
            )));
        }
        if !(self.altitude_m >= -500.0) {
            return Err(Error::Config(format!(
                "site altitude {} m below -500 m",
                self.altitude_m
            )));
        }
        if !(0.0..90.0).contains(&self.horizon_mask_deg) {
            return Err(Error::Config(format!(
                "horizon mask {} deg outside [0, 90)",
                self.horizon_mask_deg
            )));
        }
        Ok(())
    }
}

impl Default for GroundSite {
    fn default() -> Self {
        Self::al_wathba()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum PassDirection {
    Ascending,
    Descending,
}

impl PassDirection {
    fn sign(self) -> f64 {
        match self {
            PassDirection::Ascending => 1.0,
            PassDirection::Descending => -1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            PassDirection::Ascending => PassDirection::Descending,
            PassDirection::Descending => PassDirection::Ascending,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct OrbitSpec {
    pub altitude_km: f64,
    pub max_elevation_deg: f64,
    pub direction: PassDirection,
}

impl OrbitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(300.0..=2000.0).contains(&self.altitude_km) {
            return Err(Error::Config(format!(
                "orbit altitude {} km outside the LEO range [300, 2000]",
                self.altitude_km
            )));
        }
        if !(self.max_elevation_deg > 0.0 && self.max_elevation_deg <= 90.0) {
            return Err(Error::Config(format!(
                "max elevation {} deg outside (0, 90]",
                self.max_elevation_deg
            )));
        }
        Ok(())
    }

    pub fn radius_m(&self) -> f64 {
        R_EARTH + self.altitude_km * 1e3
    }

    /// Circular orbital speed, m/s.
    pub fn orbital_speed(&self) -> f64 {
        (MU_EARTH / self.radius_m()).sqrt()
    }

    /// Orbital angular rate, rad/s.
    pub fn angular_rate(&self) -> f64 {
        self.orbital_speed() / self.radius_m()
    }
}

impl Default for OrbitSpec {
    fn default() -> Self {
        Self {
            altitude_km: 500.0,
            max_elevation_deg: 70.0,
            direction: PassDirection::Ascending,
        }
    }
}

/// One time step of a pass as seen from the site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassSample {
    pub t: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub range_m: f64,
    pub transverse_velocity_mps: f64,
    pub frame_rotation_deg: f64,
    /// Azimuth rate, deg/s. Zero at an exact zenith crossing.
    pub azimuth_rate_dps: f64,
    /// Elevation rate, deg/s.
    pub elevation_rate_dps: f64,
    /// Time derivative of the unit line of sight in site `(east, north, up)`, rad/s.
    /// Defined everywhere, including at zenith.
    #[serde(default)]
    pub los_rate: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassEphemeris {
    pub site: GroundSite,
    pub orbit: OrbitSpec,
    pub step_s: f64,
    /// Time of culmination, seconds from the first sample.
    pub culmination_t: f64,
    pub samples: Vec<PassSample>,
}

impl PassEphemeris {
    pub fn duration(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.t) - self.samples[0].t
    }

    pub fn culmination(&self) -> &PassSample {
        &self.samples[self.samples.len() / 2]
    }

    /// Linear interpolation of the sample at time `t`, clamped to the pass.
    pub fn sample_at(&self, t: f64) -> PassSample {
        let first = self.samples[0].t;
        let pos = ((t - first) / self.step_s).max(0.0);
        let i = pos.floor() as usize;
        if i + 1 >= self.samples.len() {
            return *self.samples.last().unwrap();
        }
        let a = &self.samples[i];
        let b = &self.samples[i + 1];
        let f = pos - i as f64;
        let lerp = |x: f64, y: f64| x + (y - x) * f;
        // Azimuth is interpolated along the short way around.
        let mut daz = b.azimuth_deg - a.azimuth_deg;
        if daz > 180.0 {
            daz -= 360.0;
        } else if daz < -180.0 {
            daz += 360.0;
        }
        PassSample {
            t,
            azimuth_deg: (a.azimuth_deg + daz * f).rem_euclid(360.0),
            elevation_deg: lerp(a.elevation_deg, b.elevation_deg),
            range_m: lerp(a.range_m, b.range_m),
            transverse_velocity_mps: lerp(a.transverse_velocity_mps, b.transverse_velocity_mps),
            frame_rotation_deg: lerp(a.frame_rotation_deg, b.frame_rotation_deg),
            azimuth_rate_dps: lerp(a.azimuth_rate_dps, b.azimuth_rate_dps),
            elevation_rate_dps: lerp(a.elevation_rate_dps, b.elevation_rate_dps),
            los_rate: [
                lerp(a.los_rate[0], b.los_rate[0]),
                lerp(a.los_rate[1], b.los_rate[1]),
                lerp(a.los_rate[2], b.los_rate[2]),
            ],
        }
    }
}

/// Site-local kinematic state of the satellite, before frame-rotation bookkeeping.
#[derive(Debug, Clone, Copy)]
struct LookState {
    azimuth: f64,
    elevation: f64,
    range: f64,
    transverse_velocity: f64,
    azimuth_rate: f64,
    elevation_rate: f64,
    los_rate: [f64; 3],
}

/// Pass geometry in the site frame: `(east, north, up)` components.
#[derive(Debug, Clone, Copy)]
struct PassGeometry {
    radius: f64,
    angular_rate: f64,
    closest_angle: f64,
    along_sign: f64,
}

impl PassGeometry {
    fn new(orbit: &OrbitSpec) -> Self {
        let radius = orbit.radius_m();
        let el = orbit.max_elevation_deg.to_radians();
        let closest_angle = if orbit.max_elevation_deg >= 90.0 {
            0.0
        } else {
            (R_EARTH * el.cos() / radius).acos() - el
        };
        Self {
            radius,
            angular_rate: orbit.angular_rate(),
            closest_angle,
            along_sign: orbit.direction.sign(),
        }
    }

    /// Along-track angle from culmination at which the satellite crosses `mask_deg`.
    fn half_arc(&self, mask_deg: f64) -> Option<f64> {
        let mask = mask_deg.to_radians();
        let central = (R_EARTH * mask.cos() / self.radius).acos() - mask;
        let c = central.cos() / self.closest_angle.cos();
        if c > 1.0 {
            None
        } else {
            Some(c.acos())
        }
    }

    /// Satellite position and velocity relative to the site at time `dt` from culmination.
    fn relative_state(&self, dt: f64) -> ([f64; 3], [f64; 3]) {
        let phi = self.angular_rate * dt;
        let (sp, cp) = phi.sin_cos();
        let (sl, cl) = self.closest_angle.sin_cos();
        let r = self.radius;
        // closest-approach direction c = (sin λ0, 0, cos λ0), track direction d = (0, ±1, 0)
        let pos = [r * sl * cp, r * self.along_sign * sp, r * cl * cp - R_EARTH];
        let w = r * self.angular_rate;
        let vel = [-w * sl * sp, w * self.along_sign * cp, -w * cl * sp];
        (pos, vel)
    }

    fn look(&self, dt: f64) -> LookState {
        let ([e, n, u], [ve, vn, vu]) = self.relative_state(dt);
        let horiz2 = e * e + n * n;
        let horiz = horiz2.sqrt();
        let range = (horiz2 + u * u).sqrt();
        let azimuth = e.atan2(n).rem_euclid(std::f64::consts::TAU);
        let elevation = u.atan2(horiz);
        let azimuth_rate = if horiz2 > 0.0 {
            (n * ve - e * vn) / horiz2
        } else {
            0.0
        };
        let elevation_rate = if horiz > 0.0 {
            let dh = (e * ve + n * vn) / horiz;
            (vu * horiz - u * dh) / (range * range)
        } else {
            0.0
        };
        let radial = (e * ve + n * vn + u * vu) / range;
        let speed2 = ve * ve + vn * vn + vu * vu;
        let transverse_velocity = (speed2 - radial * radial).max(0.0).sqrt();
        let los_rate = [
            (ve - radial * e / range) / range,
            (vn - radial * n / range) / range,
            (vu - radial * u / range) / range,
        ];
        LookState {
            azimuth,
            elevation,
            range,
            transverse_velocity,
            azimuth_rate,
            elevation_rate,
            los_rate,
        }
    }

    fn field_rotation_rate(&self, dt: f64) -> f64 {
        let s = self.look(dt);
        frame_rotation_rate(s.azimuth_rate, s.elevation)
    }
}

/// Field-rotation rate of an alt-az Nasmyth focus, `daz/dt · sin(el)`, in the
/// units of `azimuth_rate`.
pub fn frame_rotation_rate(azimuth_rate: f64, elevation_rad: f64) -> f64 {
    azimuth_rate * elevation_rad.sin()
}

/// Generates a single culminating pass from horizon-mask rise to set.
///
/// Samples are symmetric about culmination, which is always sampled. Frame
/// rotation is zero at culmination.
pub fn generate_pass(site: &GroundSite, orbit: &OrbitSpec, step_s: f64) -> Result<PassEphemeris> {
    site.validate()?;
    orbit.validate()?;
    if !(step_s > 0.0 && step_s.is_finite()) {
        return Err(Error::Config(format!("pass step {step_s} s must be positive")));
    }
    if orbit.max_elevation_deg <= site.horizon_mask_deg {
        return Err(Error::Config(format!(
            "max elevation {} deg does not clear the {} deg horizon mask",
            orbit.max_elevation_deg, site.horizon_mask_deg
        )));
    }
    let geom = PassGeometry::new(orbit);
    let half_arc = geom
        .half_arc(site.horizon_mask_deg)
        .ok_or_else(|| Error::Config("pass never rises above the horizon mask".into()))?;
    let half_duration = half_arc / geom.angular_rate;
    let half_steps = (half_duration / step_s).floor() as i64;

    // Frame rotation integrated outward from culmination on both sides.
    let tol = 1e-9_f64.to_radians();
    let mut rotation = vec![0.0; (2 * half_steps + 1) as usize];
    for side in [1i64, -1] {
        let mut acc = 0.0;
        for k in 1..=half_steps {
            let a = (side * (k - 1)) as f64 * step_s;
            let b = (side * k) as f64 * step_s;
            acc += integrate_adaptive(&|dt| geom.field_rotation_rate(dt), a, b, tol);
            rotation[(half_steps + side * k) as usize] = acc;
        }
    }

    let samples = (-half_steps..=half_steps)
        .map(|k| {
            let dt = k as f64 * step_s;
            let s = geom.look(dt);
            PassSample {
                t: (k + half_steps) as f64 * step_s,
                azimuth_deg: s.azimuth.to_degrees(),
                elevation_deg: s.elevation.to_degrees(),
                range_m: s.range,
                transverse_velocity_mps: s.transverse_velocity,
                frame_rotation_deg: rotation[(k + half_steps) as usize].to_degrees(),
                azimuth_rate_dps: s.azimuth_rate.to_degrees(),
                elevation_rate_dps: s.elevation_rate.to_degrees(),
                los_rate: s.los_rate,
            }
        })
        .collect();

    Ok(PassEphemeris {
        site: *site,
        orbit: *orbit,
        step_s,
        culmination_t: half_steps as f64 * step_s,
        samples,
    })
}

/// Point-ahead angle `2·v⊥/c`, radians.
pub fn point_ahead_angle(sample: &PassSample) -> f64 {
    2.0 * sample.transverse_velocity_mps / SPEED_OF_LIGHT
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mount {
    #[default]
    AltAzNasmyth,
}

/// Rotation of the received polarization frame relative to the receiver frame.
///
/// Undefined exactly at zenith, where the azimuth rate diverges; callers
/// interpolate across that sample.
pub fn frame_rotation_angle(sample: &PassSample, mount: Mount) -> Result<f64> {
    match mount {
        Mount::AltAzNasmyth => {
            if sample.elevation_deg >= 90.0 {
                Err(Error::Singularity {
                    elevation_deg: sample.elevation_deg,
                })
            } else {
                Ok(sample.frame_rotation_deg)
            }
        }
    }
}

/// Integrates `sin(el)·Δaz` along an arbitrary `(azimuth_deg, elevation_deg)`
/// track, returning the cumulative rotation in degrees (first entry zero).
///
/// Azimuth steps are taken the short way around, so a track must be sampled
/// finely enough that no step exceeds 180°.
pub fn integrate_frame_rotation(track: &[(f64, f64)]) -> Vec<f64> {
    let mut out = Vec::with_capacity(track.len());
    let mut acc = 0.0;
    for (i, &(az, el)) in track.iter().enumerate() {
        if i > 0 {
            let (paz, pel) = track[i - 1];
            let mut daz = az - paz;
            if daz > 180.0 {
                daz -= 360.0;
            } else if daz < -180.0 {
                daz += 360.0;
            }
            let el_mid = 0.5 * (el + pel);
            acc += daz * el_mid.to_radians().sin();
        }
        out.push(acc);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orbit(max_el: f64) -> OrbitSpec {
        OrbitSpec {
            altitude_km: 500.0,
            max_elevation_deg: max_el,
            direction: PassDirection::Ascending,
        }
    }

    #[test]
    fn orbital_speed_at_500_km() {
        let expected = (3.986e14_f64 / 6.871e6).sqrt();
        assert!((orbit(90.0).orbital_speed() - expected).abs() < 1e-9);
        assert!((orbit(90.0).orbital_speed() - 7616.0).abs() < 1.0);
    }

    #[test]
    fn zenith_pass_culminates_overhead() {
        let pass = generate_pass(&GroundSite::default(), &orbit(90.0), 1.0).unwrap();
        let top = pass.culmination();
        assert_eq!(top.elevation_deg, 90.0);
        assert!((top.range_m - 500e3).abs() < 1e-6);
        assert!(frame_rotation_angle(top, Mount::AltAzNasmyth).is_err());
    }

    #[test]
    fn samples_are_uniform_and_above_mask() {
        let site = GroundSite::default();
        let pass = generate_pass(&site, &orbit(55.0), 0.5).unwrap();
        for w in pass.samples.windows(2) {
            assert!((w[1].t - w[0].t - 0.5).abs() < 1e-9);
        }
        for s in &pass.samples {
            assert!(s.elevation_deg >= site.horizon_mask_deg - 1e-9);
        }
        assert!((pass.culmination().elevation_deg - 55.0).abs() < 1e-9);
    }

    #[test]
    fn elevation_is_unimodal() {
        let pass = generate_pass(&GroundSite::default(), &orbit(40.0), 1.0).unwrap();
        let peak = pass.samples.len() / 2;
        for w in pass.samples[..=peak].windows(2) {
            assert!(w[1].elevation_deg > w[0].elevation_deg);
        }
        for w in pass.samples[peak..].windows(2) {
            assert!(w[1].elevation_deg < w[0].elevation_deg);
        }
    }

    #[test]
    fn rise_and_set_rotation_are_antisymmetric() {
        let pass = generate_pass(&GroundSite::default(), &orbit(70.0), 1.0).unwrap();
        let first = pass.samples.first().unwrap().frame_rotation_deg;
        let last = pass.samples.last().unwrap().frame_rotation_deg;
        assert!(first.abs() > 1.0);
        assert!((first + last).abs() < 1e-6, "{first} vs {last}");
    }

    #[test]
    fn constant_azimuth_track_has_no_rotation() {
        let track: Vec<_> = (0..50).map(|i| (123.0, 10.0 + i as f64)).collect();
        assert!(integrate_frame_rotation(&track).iter().all(|r| *r == 0.0));
    }

    #[test]
    fn point_ahead_examples() {
        let mut s = generate_pass(&GroundSite::default(), &orbit(90.0), 1.0)
            .unwrap()
            .culmination()
            .to_owned();
        assert!((point_ahead_angle(&s) - 50.8e-6).abs() < 0.1e-6);
        let base = point_ahead_angle(&s);
        s.transverse_velocity_mps *= 2.0;
        assert_eq!(point_ahead_angle(&s), 2.0 * base);
        s.transverse_velocity_mps = 0.0;
        assert_eq!(point_ahead_angle(&s), 0.0);
    }

    #[test]
    fn invalid_inputs_are_configuration_errors() {
        let site = GroundSite::default();
        assert!(matches!(generate_pass(&site, &orbit(70.0), 0.0), Err(Error::Config(_))));
        let mut low = orbit(70.0);
        low.altitude_km = 200.0;
        assert!(matches!(generate_pass(&site, &low, 1.0), Err(Error::Config(_))));
        assert!(matches!(generate_pass(&site, &orbit(5.0), 1.0), Err(Error::Config(_))));
        let bad_site = GroundSite {
            latitude_deg: 91.0,
            ..site
        };
        assert!(bad_site.validate().is_err());
    }

    #[test]
    fn interpolation_hits_samples() {
        let pass = generate_pass(&GroundSite::default(), &orbit(60.0), 1.0).unwrap();
        let s = pass.samples[17];
        let i = pass.sample_at(s.t);
        assert!((i.elevation_deg - s.elevation_deg).abs() < 1e-12);
        assert!((i.frame_rotation_deg - s.frame_rotation_deg).abs() < 1e-12);
    }
}
