//! Tip/tilt angle-of-arrival disturbance from Kolmogorov turbulence.
//!
//! Only the tilt modes are modeled. The per-axis variance uses the G-tilt
//! coefficient 0.182; the temporal behaviour is white Gaussian noise through a
//! single-pole low-pass at the Greenwood frequency, renormalized so that the
//! filtered series has exactly the target variance. With no wind the filter
//! degenerates and the series is a constant random offset (frozen atmosphere).

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference wavelength of the quoted Fried parameters, m.
pub const R0_REFERENCE_WAVELENGTH_M: f64 = 550e-9;
/// Per-axis G-tilt variance coefficient.
pub const G_TILT_COEFFICIENT: f64 = 0.182;
/// Greenwood frequency coefficient for a single boundary layer.
pub const GREENWOOD_COEFFICIENT: f64 = 0.427;
/// Test-bench ratio of the 800 mm telescope pupil to the 8 mm bench beam.
pub const BENCH_MAGNIFICATION: f64 = 100.0;
/// Minimum ratio of sample rate to Greenwood frequency.
pub const MIN_OVERSAMPLING: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TurbulenceParams {
    /// Fried parameter at 550 nm along the line of sight, m.
    pub r0_550_m: f64,
    /// Transverse boundary-layer wind, m/s.
    pub wind_mps: f64,
    pub seed: u64,
}

impl TurbulenceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r0_550_m > 0.0 && self.r0_550_m.is_finite()) {
            return Err(Error::Config(format!("r0 {} m must be positive", self.r0_550_m)));
        }
        if !(self.wind_mps >= 0.0 && self.wind_mps.is_finite()) {
            return Err(Error::Config(format!("wind {} m/s must be non-negative", self.wind_mps)));
        }
        Ok(())
    }

    /// Fried parameter at `lambda_m`.
    pub fn r0_at(&self, lambda_m: f64) -> f64 {
        scale_r0(self.r0_550_m, R0_REFERENCE_WAVELENGTH_M, lambda_m)
    }

    /// Weak turbulence, r0 = 46 mm at 550 nm.
    pub fn benign() -> Self {
        Self {
            r0_550_m: 0.046,
            wind_mps: 11.0,
            seed: 0,
        }
    }

    /// Strong turbulence, r0 = 18 mm at 550 nm, 11 m/s wind.
    pub fn worst_case() -> Self {
        Self {
            r0_550_m: 0.018,
            wind_mps: 11.0,
            seed: 0,
        }
    }
}

impl Default for TurbulenceParams {
    fn default() -> Self {
        Self::worst_case()
    }
}

/// Kolmogorov wavelength scaling `r0 ∝ λ^(6/5)`.
pub fn scale_r0(r0_ref_m: f64, lambda_ref_m: f64, lambda_m: f64) -> f64 {
    r0_ref_m * (lambda_m / lambda_ref_m).powf(1.2)
}

/// Long-exposure seeing FWHM `0.98·λ/r0`, radians.
pub fn seeing_fwhm(r0_m: f64, lambda_m: f64) -> f64 {
    0.98 * lambda_m / r0_m
}

/// One-axis RMS tilt `sqrt(0.182·(D/r0)^(5/3)·(λ/D)²)`, radians.
pub fn tilt_sigma(aperture_m: f64, r0_m: f64, lambda_m: f64) -> f64 {
    (G_TILT_COEFFICIENT * (aperture_m / r0_m).powf(5.0 / 3.0) * (lambda_m / aperture_m).powi(2))
        .sqrt()
}

/// Greenwood frequency `0.427·v/r0`, Hz.
pub fn greenwood_frequency(wind_mps: f64, r0_m: f64) -> f64 {
    GREENWOOD_COEFFICIENT * wind_mps / r0_m
}

/// Converts a sky-frame angle to the equivalent angle in the magnified bench beam.
pub fn to_bench_frame(sky_angle_rad: f64) -> f64 {
    sky_angle_rad * BENCH_MAGNIFICATION
}

/// Streaming generator of the two-axis tilt disturbance.
///
/// [`generate_jitter`] materializes the same sequence; long simulations pull
/// samples one at a time instead.
#[derive(Debug, Clone)]
pub struct JitterGenerator {
    rng: ChaCha8Rng,
    pole: f64,
    drive: f64,
    sigma: f64,
    state: Option<[f64; 2]>,
    rate_hz: f64,
    index: u64,
}

impl JitterGenerator {
    pub fn new(params: &TurbulenceParams, aperture_m: f64, lambda_m: f64, rate_hz: f64) -> Result<Self> {
        params.validate()?;
        if !(aperture_m > 0.0 && lambda_m > 0.0) {
            return Err(Error::Precondition("aperture and wavelength must be positive".into()));
        }
        let r0 = params.r0_at(lambda_m);
        let sigma = tilt_sigma(aperture_m, r0, lambda_m);
        let f_g = greenwood_frequency(params.wind_mps, r0);
        if !(rate_hz > 0.0) || rate_hz < MIN_OVERSAMPLING * f_g {
            return Err(Error::Precondition(format!(
                "sample rate {rate_hz} Hz is below {MIN_OVERSAMPLING} x the {f_g:.1} Hz Greenwood frequency"
            )));
        }
        let pole = (-std::f64::consts::TAU * f_g / rate_hz).exp();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(params.seed),
            pole,
            drive: sigma * (1.0 - pole * pole).sqrt(),
            sigma,
            state: None,
            rate_hz,
            index: 0,
        })
    }

    /// Target one-axis standard deviation, radians.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    /// Next `(tip, tilt)` sample, radians.
    pub fn next_sample(&mut self) -> [f64; 2] {
        let tip: f64 = StandardNormal.sample(&mut self.rng);
        let tilt: f64 = StandardNormal.sample(&mut self.rng);
        let next = match self.state {
            // stationary start
            None => [self.sigma * tip, self.sigma * tilt],
            Some([x, y]) => [
                self.pole * x + self.drive * tip,
                self.pole * y + self.drive * tilt,
            ],
        };
        self.state = Some(next);
        self.index += 1;
        next
    }
}

impl Iterator for JitterGenerator {
    type Item = [f64; 2];

    fn next(&mut self) -> Option<[f64; 2]> {
        Some(self.next_sample())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterSeries {
    pub rate_hz: f64,
    pub tip_rad: Vec<f64>,
    pub tilt_rad: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct JitterRecord {
    t: f64,
    tip_rad: f64,
    tilt_rad: f64,
}

impl JitterSeries {
    pub fn len(&self) -> usize {
        self.tip_rad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tip_rad.is_empty()
    }

    /// A series of zeros, useful for noiseless loop checks.
    pub fn zeros(rate_hz: f64, len: usize) -> Self {
        Self {
            rate_hz,
            tip_rad: vec![0.0; len],
            tilt_rad: vec![0.0; len],
        }
    }

    /// Writes one `{t, tip_rad, tilt_rad}` JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (i, (&tip, &tilt)) in self.tip_rad.iter().zip(&self.tilt_rad).enumerate() {
            let rec = JitterRecord {
                t: i as f64 / self.rate_hz,
                tip_rad: tip,
                tilt_rad: tilt,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads a series written by [`JitterSeries::write_jsonl`]; the rate is
    /// recovered from the first two timestamps.
    pub fn read_jsonl<R: BufRead>(input: R) -> std::io::Result<Self> {
        let mut times = Vec::new();
        let mut tip = Vec::new();
        let mut tilt = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: JitterRecord = serde_json::from_str(&line)?;
            times.push(rec.t);
            tip.push(rec.tip_rad);
            tilt.push(rec.tilt_rad);
        }
        let rate_hz = if times.len() > 1 {
            1.0 / (times[1] - times[0])
        } else {
            0.0
        };
        Ok(Self {
            rate_hz,
            tip_rad: tip,
            tilt_rad: tilt,
        })
    }
}

/// Generates `duration_s × rate_hz` samples of two independent tilt axes.
pub fn generate_jitter(
    params: &TurbulenceParams,
    aperture_m: f64,
    lambda_m: f64,
    duration_s: f64,
    rate_hz: f64,
) -> Result<JitterSeries> {
    if !(duration_s > 0.0) {
        return Err(Error::Precondition(format!("duration {duration_s} s must be positive")));
    }
    let mut gen = JitterGenerator::new(params, aperture_m, lambda_m, rate_hz)?;
    let n = (duration_s * rate_hz).round() as usize;
    let mut tip = Vec::with_capacity(n);
    let mut tilt = Vec::with_capacity(n);
    for _ in 0..n {
        let [x, y] = gen.next_sample();
        tip.push(x);
        tilt.push(y);
    }
    Ok(JitterSeries {
        rate_hz,
        tip_rad: tip,
        tilt_rad: tilt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{pearson, std_dev};

    #[test]
    fn scale_r0_examples() {
        assert_eq!(scale_r0(0.018, 550e-9, 550e-9), 0.018);
        assert!((scale_r0(0.018, 550e-9, 850e-9) - 30.35e-3).abs() < 0.05e-3);
        assert!((scale_r0(0.046, 550e-9, 850e-9) - 77.6e-3).abs() < 0.1e-3);
    }

    #[test]
    fn seeing_examples() {
        assert!((seeing_fwhm(0.018, 550e-9) - 29.9e-6).abs() < 0.1e-6);
        assert!((seeing_fwhm(0.046, 550e-9) - 11.7e-6).abs() < 0.1e-6);
        assert_eq!(seeing_fwhm(0.009, 550e-9), 2.0 * seeing_fwhm(0.018, 550e-9));
    }

    #[test]
    fn tilt_sigma_examples() {
        assert!((tilt_sigma(0.8, 0.018, 550e-9) - 6.92e-6).abs() < 0.05e-6);
        assert!((tilt_sigma(0.8, 0.046, 550e-9) - 3.17e-6).abs() < 0.05e-6);
        let unit = 0.182_f64.sqrt() * (550e-9 / 0.8);
        assert!((tilt_sigma(0.8, 0.8, 550e-9) - unit).abs() / unit < 1e-15);
    }

    #[test]
    fn tilt_sigma_is_wavelength_independent_under_scaling() {
        let a = tilt_sigma(0.8, 0.018, 550e-9);
        let b = tilt_sigma(0.8, scale_r0(0.018, 550e-9, 1550e-9), 1550e-9);
        assert!((a - b).abs() / a < 1e-12);
    }

    #[test]
    fn greenwood_examples() {
        assert!((greenwood_frequency(11.0, 0.018) - 260.9).abs() < 0.5);
        assert!((greenwood_frequency(11.0, 0.046) - 102.1).abs() < 0.5);
        assert_eq!(greenwood_frequency(0.0, 0.03), 0.0);
    }

    #[test]
    fn jitter_is_deterministic_per_seed() {
        let p = TurbulenceParams { seed: 7, ..TurbulenceParams::worst_case() };
        let a = generate_jitter(&p, 0.8, 1550e-9, 0.5, 20_000.0).unwrap();
        let b = generate_jitter(&p, 0.8, 1550e-9, 0.5, 20_000.0).unwrap();
        assert_eq!(a, b);
        let c = generate_jitter(&TurbulenceParams { seed: 8, ..p }, 0.8, 1550e-9, 0.5, 20_000.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn frozen_atmosphere_is_constant() {
        let p = TurbulenceParams { r0_550_m: 0.046, wind_mps: 0.0, seed: 3 };
        let s = generate_jitter(&p, 0.8, 550e-9, 0.01, 10_000.0).unwrap();
        assert_eq!(s.len(), 100);
        assert!(s.tip_rad.iter().all(|&x| x == s.tip_rad[0]));
        assert!(s.tilt_rad.iter().all(|&x| x == s.tilt_rad[0]));
        assert!(s.tip_rad[0] != 0.0);
    }

    #[test]
    fn undersampling_is_rejected() {
        let p = TurbulenceParams::worst_case();
        let err = generate_jitter(&p, 0.8, 550e-9, 1.0, 1000.0).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn axes_are_uncorrelated_with_target_variance() {
        let p = TurbulenceParams { seed: 11, ..TurbulenceParams::worst_case() };
        let s = generate_jitter(&p, 0.8, 550e-9, 20.0, 10_000.0).unwrap();
        let target = tilt_sigma(0.8, 0.018, 550e-9);
        assert!((std_dev(&s.tip_rad) / target - 1.0).abs() < 0.05);
        assert!((std_dev(&s.tilt_rad) / target - 1.0).abs() < 0.05);
        assert!(pearson(&s.tip_rad, &s.tilt_rad).abs() < 0.02);
    }

    #[test]
    fn jsonl_replay() {
        let p = TurbulenceParams { seed: 2, ..TurbulenceParams::benign() };
        let s = generate_jitter(&p, 0.8, 550e-9, 0.01, 20_000.0).unwrap();
        let mut buf = Vec::new();
        s.write_jsonl(&mut buf).unwrap();
        let back = JitterSeries::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back.tip_rad, s.tip_rad);
        assert_eq!(back.tilt_rad, s.tilt_rad);
        assert!((back.rate_hz - 20_000.0).abs() < 1e-6);
    }
}
