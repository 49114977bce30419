//! Jones and Stokes calculus, waveplates, and QWP–HWP–QWP compensation.
//!
//! Conventions used throughout:
//!
//! * Jones vectors are `(H, V)` amplitudes.
//! * Stokes `Q = |H|² − |V|²`, `U = 2·Re(H·V̄)`, `V = 2·Im(H·V̄)`, so the
//!   right-circular state `(1, −i)/√2` has `V = +1`.
//! * A retarder of retardance `δ` with fast axis at `θ` is
//!   `R(θ)·diag(1, e^{iδ})·R(−θ)` where `R` is the physical rotation matrix.
//! * Light traverses the compensator as QWP1, then HWP, then QWP2, so the
//!   composite matrix is `Q(θ₂)·H(θ_h)·Q(θ₁)`.
//!
//! The compensator solver maps the target unitary to a rotation of the
//! Poincaré sphere, takes its Z–Y–Z Euler angles and reads off the plate
//! angles in closed form, then polishes with a few Gauss–Newton steps.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI};
use std::io::{BufRead, Write};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{axis_difference, wrap_half_turn};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

/// Tolerance used to reject non-unitary elements.
pub const UNITARY_TOLERANCE: f64 = 1e-10;
/// Minimum degree of linear polarization for a trustworthy azimuth.
pub const MIN_AZIMUTH_DOLP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JonesVector {
    pub h: Complex64,
    pub v: Complex64,
}

impl JonesVector {
    /// Builds a normalized vector; the zero vector is rejected.
    pub fn new(h: Complex64, v: Complex64) -> Result<Self> {
        let n = (h.norm_sqr() + v.norm_sqr()).sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Contract("Jones vector must have non-zero finite norm".into()));
        }
        Ok(Self { h: h / n, v: v / n })
    }

    pub fn horizontal() -> Self {
        Self { h: ONE, v: ZERO }
    }

    pub fn vertical() -> Self {
        Self { h: ZERO, v: ONE }
    }

    pub fn diagonal() -> Self {
        Self::linear(45.0)
    }

    pub fn antidiagonal() -> Self {
        Self::linear(-45.0)
    }

    pub fn right_circular() -> Self {
        Self {
            h: Complex64::new(FRAC_1_SQRT_2, 0.0),
            v: Complex64::new(0.0, -FRAC_1_SQRT_2),
        }
    }

    pub fn left_circular() -> Self {
        Self {
            h: Complex64::new(FRAC_1_SQRT_2, 0.0),
            v: Complex64::new(0.0, FRAC_1_SQRT_2),
        }
    }

    /// Linear polarization at azimuth `psi_deg` from horizontal.
    pub fn linear(psi_deg: f64) -> Self {
        let (s, c) = psi_deg.to_radians().sin_cos();
        Self {
            h: Complex64::new(c, 0.0),
            v: Complex64::new(s, 0.0),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.h.norm_sqr() + self.v.norm_sqr()).sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Self { h: self.h / n, v: self.v / n }
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &JonesVector) -> Complex64 {
        self.h.conj() * other.h + self.v.conj() * other.v
    }

    /// `|⟨self|other⟩|²`, the projective detection probability for unit vectors.
    pub fn overlap(&self, other: &JonesVector) -> f64 {
        self.inner(other).norm_sqr()
    }

    pub fn stokes(&self) -> StokesVector {
        let n2 = self.h.norm_sqr() + self.v.norm_sqr();
        let cross = self.h * self.v.conj();
        StokesVector {
            q: (self.h.norm_sqr() - self.v.norm_sqr()) / n2,
            u: 2.0 * cross.re / n2,
            v: 2.0 * cross.im / n2,
        }
    }

    /// True when the two states differ only by a global phase.
    pub fn same_state(&self, other: &JonesVector, tol: f64) -> bool {
        (1.0 - self.normalized().overlap(&other.normalized())).abs() < tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StokesVector {
    pub q: f64,
    pub u: f64,
    pub v: f64,
}

impl StokesVector {
    pub fn degree_of_linear_polarization(&self) -> f64 {
        self.q.hypot(self.u)
    }

    /// `½·atan2(U, Q)` in degrees, in `(−90, 90]`.
    pub fn azimuth_deg(&self) -> f64 {
        wrap_half_turn(0.5 * self.u.atan2(self.q).to_degrees())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JonesMatrix(pub [[Complex64; 2]; 2]);

impl JonesMatrix {
    pub fn identity() -> Self {
        Self([[ONE, ZERO], [ZERO, ONE]])
    }

    /// Physical rotation of the polarization frame by `theta_deg`.
    pub fn rotation(theta_deg: f64) -> Self {
        let (s, c) = theta_deg.to_radians().sin_cos();
        Self([
            [Complex64::new(c, 0.0), Complex64::new(-s, 0.0)],
            [Complex64::new(s, 0.0), Complex64::new(c, 0.0)],
        ])
    }

    /// Linear retarder of retardance `retardance_deg` with fast axis at `axis_deg`.
    pub fn retarder(axis_deg: f64, retardance_deg: f64) -> Self {
        let d = Self([
            [ONE, ZERO],
            [ZERO, Complex64::from_polar(1.0, retardance_deg.to_radians())],
        ]);
        Self::rotation(axis_deg) * d * Self::rotation(-axis_deg)
    }

    pub fn scaled(&self, k: Complex64) -> Self {
        let m = self.0;
        Self([[m[0][0] * k, m[0][1] * k], [m[1][0] * k, m[1][1] * k]])
    }

    pub fn dagger(&self) -> Self {
        let m = self.0;
        Self([
            [m[0][0].conj(), m[1][0].conj()],
            [m[0][1].conj(), m[1][1].conj()],
        ])
    }

    pub fn trace(&self) -> Complex64 {
        self.0[0][0] + self.0[1][1]
    }

    pub fn det(&self) -> Complex64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn apply(&self, s: &JonesVector) -> JonesVector {
        let m = self.0;
        JonesVector {
            h: m[0][0] * s.h + m[0][1] * s.v,
            v: m[1][0] * s.h + m[1][1] * s.v,
        }
    }

    /// Largest entry of `|M·M† − I|`.
    pub fn unitarity_error(&self) -> f64 {
        let p = *self * self.dagger();
        let mut err = 0.0_f64;
        for (r, row) in p.0.iter().enumerate() {
            for (c, x) in row.iter().enumerate() {
                let target = if r == c { ONE } else { ZERO };
                err = err.max((x - target).norm());
            }
        }
        err
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.unitarity_error() <= tol
    }

    fn require_unitary(&self, what: &str) -> Result<()> {
        let err = self.unitarity_error();
        if err <= UNITARY_TOLERANCE && err.is_finite() {
            Ok(())
        } else {
            Err(Error::Contract(format!("{what} is not unitary (error {err:.3e})")))
        }
    }

    /// True when the matrices agree up to a global phase.
    pub fn equals_up_to_phase(&self, other: &JonesMatrix, tol: f64) -> bool {
        let t = (other.dagger() * *self).trace().norm();
        (1.0 - t * t / 4.0).abs() < tol
    }

    /// The rotation this unitary induces on the Poincaré sphere, axes `(Q, U, V)`.
    pub fn poincare_rotation(&self) -> [[f64; 3]; 3] {
        let s = pauli();
        let md = self.dagger();
        let mut o = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                o[i][j] = 0.5 * (s[i] * *self * s[j] * md).trace().re;
            }
        }
        o
    }
}

impl std::ops::Mul for JonesMatrix {
    type Output = JonesMatrix;

    fn mul(self, rhs: JonesMatrix) -> JonesMatrix {
        let a = self.0;
        let b = rhs.0;
        let mut out = [[ZERO; 2]; 2];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, x) in row.iter_mut().enumerate() {
                *x = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
        }
        JonesMatrix(out)
    }
}

/// Pauli-type matrices aligned with the Stokes axes `(Q, U, V)`.
fn pauli() -> [JonesMatrix; 3] {
    [
        JonesMatrix([[ONE, ZERO], [ZERO, -ONE]]),
        JonesMatrix([[ZERO, ONE], [ONE, ZERO]]),
        JonesMatrix([[ZERO, I], [-I, ZERO]]),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaveplateKind {
    Quarter,
    Half,
}

/// Jones matrix of an ideal waveplate with fast axis at `theta_deg`.
pub fn waveplate(kind: WaveplateKind, theta_deg: f64) -> JonesMatrix {
    let retardance = match kind {
        WaveplateKind::Quarter => 90.0,
        WaveplateKind::Half => 180.0,
    };
    JonesMatrix::retarder(theta_deg, retardance)
}

/// Applies `elements` in propagation order (first element is met first).
pub fn apply_chain(elements: &[JonesMatrix], state: &JonesVector) -> Result<JonesVector> {
    let mut out = *state;
    for (i, m) in elements.iter().enumerate() {
        m.require_unitary(&format!("chain element {i}"))?;
        out = m.apply(&out);
    }
    Ok(out.normalized())
}

/// Azimuth of the polarization ellipse, degrees in `(−90, 90]`.
pub fn polarization_azimuth(state: &JonesVector) -> Result<f64> {
    let s = state.stokes();
    let dolp = s.degree_of_linear_polarization();
    if dolp <= MIN_AZIMUTH_DOLP {
        return Err(Error::LowConfidence { dolp });
    }
    Ok(s.azimuth_deg())
}

/// Fast-axis angles of the QWP–HWP–QWP compensator, each in `[0°, 180°)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WaveplateSet {
    pub theta_qwp1_deg: f64,
    pub theta_hwp_deg: f64,
    pub theta_qwp2_deg: f64,
}

fn normalize_axis(deg: f64) -> f64 {
    let a = deg.rem_euclid(180.0);
    // rem_euclid can round up to exactly 180 for tiny negative inputs
    if a >= 180.0 || a.abs() < 1e-12 || (180.0 - a) < 1e-12 {
        0.0
    } else {
        a
    }
}

impl WaveplateSet {
    pub fn new(q1: f64, h: f64, q2: f64) -> Self {
        Self {
            theta_qwp1_deg: normalize_axis(q1),
            theta_hwp_deg: normalize_axis(h),
            theta_qwp2_deg: normalize_axis(q2),
        }
    }

    pub fn angles(&self) -> [f64; 3] {
        [self.theta_qwp1_deg, self.theta_hwp_deg, self.theta_qwp2_deg]
    }

    /// Composite Jones matrix `Q(θ₂)·H(θ_h)·Q(θ₁)`.
    pub fn composite(&self) -> JonesMatrix {
        waveplate(WaveplateKind::Quarter, self.theta_qwp2_deg)
            * waveplate(WaveplateKind::Half, self.theta_hwp_deg)
            * waveplate(WaveplateKind::Quarter, self.theta_qwp1_deg)
    }

    /// Sum of per-plate axis distances to `other`, degrees.
    pub fn distance(&self, other: &WaveplateSet) -> f64 {
        self.angles()
            .iter()
            .zip(other.angles())
            .map(|(a, b)| axis_difference(*a, b).abs())
            .sum()
    }

    /// Largest per-plate axis distance to `other`, degrees.
    pub fn max_step(&self, other: &WaveplateSet) -> f64 {
        self.angles()
            .iter()
            .zip(other.angles())
            .map(|(a, b)| axis_difference(*a, b).abs())
            .fold(0.0, f64::max)
    }

    /// Moves each plate from `self` toward `target` by at most `max_step_deg`.
    pub fn step_toward(&self, target: &WaveplateSet, max_step_deg: f64) -> WaveplateSet {
        let step = |from: f64, to: f64| {
            let d = axis_difference(to, from);
            from + d.clamp(-max_step_deg, max_step_deg)
        };
        WaveplateSet::new(
            step(self.theta_qwp1_deg, target.theta_qwp1_deg),
            step(self.theta_hwp_deg, target.theta_hwp_deg),
            step(self.theta_qwp2_deg, target.theta_qwp2_deg),
        )
    }

    fn lex_key(&self) -> (f64, f64, f64) {
        (self.theta_qwp1_deg, self.theta_hwp_deg, self.theta_qwp2_deg)
    }
}

/// `1 − |tr(W·C)|²/4`; zero when the set undoes the channel up to phase.
pub fn residual_infidelity(channel: &JonesMatrix, set: &WaveplateSet) -> f64 {
    let t = (set.composite() * *channel).trace().norm_sqr();
    (1.0 - t / 4.0).clamp(0.0, 1.0)
}

/// Z–Y–Z Euler angles `(a, b, c)` with `O = Rz(a)·Ry(b)·Rz(c)`, `b ∈ [0, π]`.
/// Returns `None` for `b` when the decomposition is degenerate.
enum Euler {
    Regular { a: f64, b: f64, c: f64 },
    /// `b ≈ 0`: only `a + c` is defined.
    Aligned { sum: f64 },
    /// `b ≈ π`: only `a − c` is defined.
    Flipped { diff: f64 },
}

const EULER_DEGENERACY: f64 = 1e-7;

fn euler_zyz(o: &[[f64; 3]; 3]) -> Euler {
    let cb = o[2][2].clamp(-1.0, 1.0);
    let sb = (o[0][2].powi(2) + o[1][2].powi(2)).sqrt();
    if sb < EULER_DEGENERACY {
        if cb > 0.0 {
            Euler::Aligned {
                sum: o[1][0].atan2(o[0][0]),
            }
        } else {
            Euler::Flipped {
                diff: (-o[1][0]).atan2(o[1][1]),
            }
        }
    } else {
        Euler::Regular {
            a: o[1][2].atan2(o[0][2]),
            b: sb.atan2(cb),
            c: o[2][1].atan2(-o[2][0]),
        }
    }
}

/// Handedness of the quarter-wave rotation about the Q axis for the sign
/// conventions above: `Q(0)` maps `+U` to `−V`.
const QWP_HANDEDNESS: f64 = -1.0;

/// All closed-form compensator solutions for `target` (the desired composite).
fn analytic_candidates(target: &JonesMatrix, q1_hint: f64) -> Vec<WaveplateSet> {
    let o = target.poincare_rotation();
    let s = QWP_HANDEDNESS;
    let mut out = Vec::with_capacity(8);
    // composite = Rz(2·q2)·Ry(−s·γ)·Rz(−2·q1), γ = 4h − 2q1 − 2q2 (radians on the sphere)
    let mut push = |q1: f64, gamma: f64, q2: f64| {
        let h = 0.25 * (gamma + 2.0 * q1 + 2.0 * q2);
        for k in 0..2 {
            out.push(WaveplateSet::new(
                q1.to_degrees(),
                (h + k as f64 * FRAC_PI_2).to_degrees(),
                q2.to_degrees(),
            ));
        }
    };
    match euler_zyz(&o) {
        Euler::Regular { a, b, c } => {
            for (a, b, c) in [(a, b, c), (a + PI, -b, c + PI)] {
                push(-0.5 * c, -s * b, 0.5 * a);
            }
        }
        Euler::Aligned { sum } => {
            // Rz(2(q2 − q1)) = Rz(sum)
            for q1 in [0.0, q1_hint] {
                push(q1, 0.0, q1 + 0.5 * sum);
            }
        }
        Euler::Flipped { diff } => {
            // Rz(2q2)·Ry(π)·Rz(−2q1) = Rz(2(q2 + q1))·Ry(π)
            for q1 in [0.0, q1_hint] {
                push(q1, PI, 0.5 * diff - q1);
            }
        }
    }
    out
}

/// Gauss–Newton polish of the plate angles against `target`.
fn refine(target: &JonesMatrix, set: WaveplateSet) -> WaveplateSet {
    let infidelity = |w: &WaveplateSet| {
        let t = (target.dagger() * w.composite()).trace().norm_sqr();
        (1.0 - t / 4.0).max(0.0)
    };
    // residual: rotation vector of O_target^T · O_set (small-angle)
    let residual = |w: &WaveplateSet| -> [f64; 3] {
        let m = target.dagger() * w.composite();
        // fix global phase so that the trace is real and positive
        let tr = m.trace();
        let m = if tr.norm() > 0.0 { m.scaled(tr.conj() / tr.norm()) } else { m };
        // m ≈ I − i(θ/2)·n·σ ; components from the Pauli projections
        let p = pauli();
        [
            -(p[0] * m).trace().im,
            -(p[1] * m).trace().im,
            -(p[2] * m).trace().im,
        ]
    };
    let mut cur = set;
    let mut cur_inf = infidelity(&cur);
    for _ in 0..8 {
        if cur_inf < 1e-15 {
            break;
        }
        let r0 = residual(&cur);
        let h = 1e-6;
        let mut jac = [[0.0; 3]; 3];
        let base = cur.angles();
        for k in 0..3 {
            let mut a = base;
            a[k] += h;
            let rk = residual(&WaveplateSet {
                theta_qwp1_deg: a[0],
                theta_hwp_deg: a[1],
                theta_qwp2_deg: a[2],
            });
            for row in 0..3 {
                jac[row][k] = (rk[row] - r0[row]) / h;
            }
        }
        let Some(delta) = solve3(&jac, &r0) else { break };
        let next = WaveplateSet::new(base[0] - delta[0], base[1] - delta[1], base[2] - delta[2]);
        let next_inf = infidelity(&next);
        if next_inf < cur_inf {
            cur = next;
            cur_inf = next_inf;
        } else {
            break;
        }
    }
    cur
}

fn solve3(a: &[[f64; 3]; 3], b: &[f64; 3]) -> Option<[f64; 3]> {
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    if d.abs() < 1e-300 {
        return None;
    }
    let mut x = [0.0; 3];
    for (k, xk) in x.iter_mut().enumerate() {
        let mut m = *a;
        for r in 0..3 {
            m[r][k] = b[r];
        }
        *xk = det(&m) / d;
    }
    Some(x)
}

fn candidates_for(channel: &JonesMatrix, q1_hint: f64) -> Result<Vec<(WaveplateSet, f64)>> {
    channel.require_unitary("channel")?;
    let target = channel.dagger();
    let mut sols: Vec<(WaveplateSet, f64)> = analytic_candidates(&target, q1_hint)
        .into_iter()
        .map(|w| {
            let w = refine(&target, w);
            (w, residual_infidelity(channel, &w))
        })
        .collect();
    sols.sort_by(|a, b| a.0.lex_key().partial_cmp(&b.0.lex_key()).unwrap());
    Ok(sols)
}

/// Tolerance below which two solutions are considered equivalent.
const SOLUTION_TOLERANCE: f64 = 1e-9;

/// Plate angles whose composite undoes `channel` up to a global phase.
///
/// Among equivalent solutions the lexicographically smallest
/// `(θ_q1, θ_h, θ_q2)` is returned; when the plate axes are degenerate the
/// first quarter-wave plate is parked at 0°.
pub fn solve_compensation(channel: &JonesMatrix) -> Result<WaveplateSet> {
    let sols = candidates_for(channel, 0.0)?;
    let best = sols
        .iter()
        .map(|s| s.1)
        .fold(f64::INFINITY, f64::min);
    Ok(sols
        .into_iter()
        .find(|s| s.1 <= best.max(SOLUTION_TOLERANCE))
        .map(|s| s.0)
        .expect("decomposition always yields candidates"))
}

/// Like [`solve_compensation`] but picks, among equivalent solutions, the one
/// closest to `previous`. Used to keep motor trajectories continuous.
pub fn solve_compensation_near(channel: &JonesMatrix, previous: &WaveplateSet) -> Result<WaveplateSet> {
    let sols = candidates_for(channel, previous.theta_qwp1_deg.to_radians())?;
    let best = sols.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    Ok(sols
        .into_iter()
        .filter(|s| s.1 <= best.max(SOLUTION_TOLERANCE))
        .min_by(|a, b| {
            a.0.distance(previous)
                .partial_cmp(&b.0.distance(previous))
                .unwrap()
        })
        .map(|s| s.0)
        .expect("decomposition always yields candidates"))
}

/// One closed-loop correction from a measured polarization azimuth.
///
/// The compensator output is rotated by `−gain·(measured − reference)` and
/// the plates are re-solved for the updated composite, staying on the branch
/// nearest `current`.
pub fn closed_loop_step(
    measured_psi_deg: f64,
    reference_psi_deg: f64,
    current: &WaveplateSet,
    gain: f64,
) -> Result<WaveplateSet> {
    if !(gain > 0.0 && gain <= 1.0) {
        return Err(Error::Precondition(format!("loop gain {gain} outside (0, 1]")));
    }
    let error = axis_difference(measured_psi_deg, reference_psi_deg);
    if error == 0.0 {
        return Ok(*current);
    }
    let updated = JonesMatrix::rotation(-gain * error) * current.composite();
    solve_compensation_near(&updated.dagger(), current)
}

/// Basis-averaged misalignment error `sin²(Δθ)`.
pub fn qber_from_misalignment(delta_deg: f64) -> f64 {
    delta_deg.to_radians().sin().powi(2)
}

/// Haar-distributed 2×2 unitary with a uniformly random global phase.
pub fn random_unitary<R: Rng + ?Sized>(rng: &mut R) -> JonesMatrix {
    let mut q = [0.0_f64; 4];
    loop {
        for x in q.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            q.iter_mut().for_each(|x| *x /= n);
            break;
        }
    }
    let a = Complex64::new(q[0], q[1]);
    let b = Complex64::new(q[2], q[3]);
    let su2 = JonesMatrix([[a, -b.conj()], [b, a.conj()]]);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    su2.scaled(Complex64::from_polar(1.0, phase))
}

/// One entry of a precomputed waveplate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub t: f64,
    pub q1_deg: f64,
    pub h_deg: f64,
    pub q2_deg: f64,
}

impl ScheduleEntry {
    pub fn set(&self) -> WaveplateSet {
        WaveplateSet::new(self.q1_deg, self.h_deg, self.q2_deg)
    }
}

/// Open-loop compensator trajectory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WaveplateSchedule {
    pub entries: Vec<ScheduleEntry>,
}

impl WaveplateSchedule {
    /// Builds a schedule from `(t, channel)` pairs, keeping consecutive
    /// solutions on the closest branch.
    pub fn from_channels<I>(channels: I) -> Result<Self>
    where
        I: IntoIterator<Item = (f64, JonesMatrix)>,
    {
        let mut entries = Vec::new();
        let mut prev: Option<WaveplateSet> = None;
        for (t, c) in channels {
            let set = match prev {
                None => solve_compensation(&c)?,
                Some(p) => solve_compensation_near(&c, &p)?,
            };
            entries.push(ScheduleEntry {
                t,
                q1_deg: set.theta_qwp1_deg,
                h_deg: set.theta_hwp_deg,
                q2_deg: set.theta_qwp2_deg,
            });
            prev = Some(set);
        }
        Ok(Self { entries })
    }

    /// The latest entry at or before `t` (the first entry before the schedule starts).
    pub fn at(&self, t: f64) -> Option<WaveplateSet> {
        let idx = self.entries.partition_point(|e| e.t <= t + 1e-9);
        let e = if idx == 0 { self.entries.first() } else { self.entries.get(idx - 1) };
        e.map(ScheduleEntry::set)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> std::io::Result<Self> {
        let mut entries = Vec::new();
        for line in input.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { entries })
    }
}
