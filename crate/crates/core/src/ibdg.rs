//! Analytical inverter-based distributed generator (IBDG).
//!
//! The inverter is a three-wire current-controlled source whose phase currents
//! follow `I_φ = α·I_ref,φ − β·V_φ`, with `α` and `β` set by the sensing
//! position. The reference current uses flexible positive/negative-sequence
//! control (FPNSC):
//!
//! ```text
//! I_ref,φ = P3G (k1 V+_φ/|V+|² + (1−k1) V-_φ/|V-|²)
//!         + Q3G (k2 V+_φ⊥/|V+|² + (1−k2) V-_φ⊥/|V-|²),      V⊥ = −jV
//! ```
//!
//! When |V-| falls below [`EPS_SEQ`] the negative-sequence control terms are
//! dropped and the positive-sequence weights become one, which is the balanced
//! positive-sequence (BPSC) current.
//!
//! Peak phase currents use the closed form
//! `I_pk² = (P C1 cosγ − Q C2 sinγ)² + (−Q C3 cosγ − P C4 sinγ)²` where C1 and
//! C4 carry the active weight `k1` and C2 and C3 carry the reactive weight `k2`.

use num_complex::Complex64;
use thiserror::Error;

use crate::sequence::{gamma_set, orthogonal, phase_to_sequence, Gamma, Phase, PhasorSet, SequenceSet, EPS_SEQ};
use crate::voltvar::VoltVarCurve;
use crate::SingularVoltage;

/// |V+| below which the device equations are singular.
pub const V_POS_MIN: f64 = 1e-12;

/// Relative size of B (in units of |V+|²) below which a phase places no bound on Q.
pub const EPS_B: f64 = 1e-12;

/// Half-width of the smooth knee of the Q limiter, as a fraction of `q_max`.
pub const Q_LIMIT_KNEE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IbdgError {
    #[error(transparent)]
    SingularVoltage(#[from] SingularVoltage),
    #[error("reactive-limit denominator B = {b:e} is negative on phase {phase}")]
    Degenerate { b: f64, phase: Phase },
    #[error("allowed current must be positive, got {0}")]
    BadRating(f64),
}

/// Control and sensing parameters of an FPNSC inverter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpnscControl {
    pub k1: f64,
    pub k2: f64,
    pub alpha: Complex64,
    pub beta: Complex64,
}

impl Default for FpnscControl {
    fn default() -> Self {
        FpnscControl {
            k1: 1.0,
            k2: 1.0,
            alpha: Complex64::new(1.0, 0.0),
            beta: Complex64::new(0.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IbdgDevice {
    pub id: u32,
    pub bus: u32,
    /// Three-phase active power (three-phase base), supply-driven.
    pub p3g: f64,
    pub control: FpnscControl,
    /// Maximum instantaneous phase current.
    pub i_rating: f64,
    pub voltvar: VoltVarCurve,
}

impl IbdgDevice {
    pub fn check(&self) -> Result<(), String> {
        let c = &self.control;
        if !(0.0..=1.0).contains(&c.k1) || !(0.0..=1.0).contains(&c.k2) {
            return Err(format!("k1 and k2 must lie in [0, 1], got {} and {}", c.k1, c.k2));
        }
        if !(self.i_rating.is_finite() && self.i_rating > 0.0) {
            return Err(format!("i_rating must be positive, got {}", self.i_rating));
        }
        if !(self.p3g.is_finite() && self.p3g >= 0.0) {
            return Err(format!("p3g must be non-negative, got {}", self.p3g));
        }
        let finite = |z: Complex64| z.re.is_finite() && z.im.is_finite();
        if !(finite(c.alpha) && finite(c.beta)) {
            return Err("alpha and beta must be finite".into());
        }
        Ok(())
    }
}

/// Effective sequence weights: `(k1, k2, negative terms active)`.
fn weights(vneg: Complex64, k1: f64, k2: f64) -> (f64, f64, bool) {
    if vneg.norm() < EPS_SEQ {
        (1.0, 1.0, false)
    } else {
        (k1, k2, true)
    }
}

fn check_vpos(vpos: Complex64) -> Result<(), SingularVoltage> {
    if vpos.norm() < V_POS_MIN {
        Err(SingularVoltage { magnitude: vpos.norm() })
    } else {
        Ok(())
    }
}

/// Per-phase FPNSC reference currents.
pub fn fpnsc_reference(
    vpos: Complex64,
    vneg: Complex64,
    p3g: f64,
    q3g: f64,
    k1: f64,
    k2: f64,
) -> Result<PhasorSet, SingularVoltage> {
    check_vpos(vpos)?;
    let (k1, k2, neg) = weights(vneg, k1, k2);
    let seq = SequenceSet::new(Complex64::new(0.0, 0.0), vpos, vneg);
    Ok(PhasorSet(Phase::ALL.map(|p| {
        let vp = seq.positive_on(p);
        let mut i = p3g * k1 * vp / vpos.norm_sqr() + q3g * k2 * orthogonal(vp) / vpos.norm_sqr();
        if neg {
            let vn = seq.negative_on(p);
            i += p3g * (1.0 - k1) * vn / vneg.norm_sqr() + q3g * (1.0 - k2) * orthogonal(vn) / vneg.norm_sqr();
        }
        i
    })))
}

/// Phase currents `I_φ = α·I_ref,φ − β·V_φ` injected by the device.
pub fn ibdg_injection(control: &FpnscControl, p3g: f64, q3g: f64, v_bus: &PhasorSet) -> Result<PhasorSet, SingularVoltage> {
    let s = phase_to_sequence(v_bus);
    let iref = fpnsc_reference(s.positive, s.negative, p3g, q3g, control.k1, control.k2)?;
    Ok(PhasorSet(Phase::ALL.map(|p| iref[p] * control.alpha - v_bus[p] * control.beta)))
}

/// Rectangular sequence currents of one phase.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SplitCurrent {
    pub pos_re: f64,
    pub pos_im: f64,
    pub neg_re: f64,
    pub neg_im: f64,
}

/// Sequence-split rectangular currents for all phases plus the passive
/// zero-sequence shunt term `−β·V0` (identical on every phase).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SequenceCurrents {
    pub phases: [SplitCurrent; 3],
    pub zero: Complex64,
}

impl SequenceCurrents {
    pub fn recombine(&self) -> PhasorSet {
        PhasorSet(self.phases.map(|s| Complex64::new(s.pos_re + s.neg_re, s.pos_im + s.neg_im) + self.zero))
    }
}

/// Real and imaginary currents contributed by one sequence component `v` of a
/// phase, with active weight `wp` and reactive weight `wq`.
fn rectangular_terms(control: &FpnscControl, p3g: f64, q3g: f64, wp: f64, wq: f64, control_active: bool, v: Complex64) -> (f64, f64) {
    let (ar, ai) = (control.alpha.re, control.alpha.im);
    let (br, bi) = (control.beta.re, control.beta.im);
    let (vr, vi) = (v.re, v.im);
    let mut re = -(br * vr - bi * vi);
    let mut im = -(bi * vr + br * vi);
    if control_active {
        let m2 = vr * vr + vi * vi;
        re += wp * p3g * (ar * vr - ai * vi) / m2 + wq * q3g * (ai * vr + ar * vi) / m2;
        im += wp * p3g * (ai * vr + ar * vi) / m2 - wq * q3g * (ar * vr - ai * vi) / m2;
    }
    (re, im)
}

/// Splits the device current into positive- and negative-sequence real and
/// imaginary parts per phase.
///
/// The positive real part is
/// `k1 P (α_R V+_R − α_I V+_I)/|V+|² + k2 Q (α_I V+_R + α_R V+_I)/|V+|² − (β_R V+_R − β_I V+_I)`;
/// the other three follow from the same expansion of `α·I_ref − β·V`.
pub fn ibdg_sequence_split(control: &FpnscControl, p3g: f64, q3g: f64, vseq: &SequenceSet) -> Result<SequenceCurrents, SingularVoltage> {
    check_vpos(vseq.positive)?;
    let (k1, k2, neg) = weights(vseq.negative, control.k1, control.k2);
    let phases = Phase::ALL.map(|p| {
        let (pos_re, pos_im) = rectangular_terms(control, p3g, q3g, k1, k2, true, vseq.positive_on(p));
        let (neg_re, neg_im) = rectangular_terms(control, p3g, q3g, 1.0 - k1, 1.0 - k2, neg, vseq.negative_on(p));
        SplitCurrent {
            pos_re,
            pos_im,
            neg_re,
            neg_im,
        }
    });
    Ok(SequenceCurrents {
        phases,
        zero: -control.beta * vseq.zero,
    })
}

/// Order of the device unknowns in [`IbdgLinearization`] rows.
pub const DEVICE_VARS: usize = 7;

/// Device currents and their partial derivatives.
///
/// `sequence[φ][k]` is `∂I_φ/∂y_k` for `y = (V+_R, V+_I, V-_R, V-_I, V0_R, V0_I, Q3G)`;
/// `phase[φ][k]` is `∂I_φ/∂x_k` for `x = (V_A,R, V_A,I, V_B,R, V_B,I, V_C,R, V_C,I, Q3G)`.
/// Partials are complex: real part for `I_R`, imaginary part for `I_I`.
#[derive(Debug, Clone, PartialEq)]
pub struct IbdgLinearization {
    pub currents: PhasorSet,
    pub sequence: [[Complex64; DEVICE_VARS]; 3],
    pub phase: [[Complex64; DEVICE_VARS]; 3],
}

pub fn ibdg_linearize(control: &FpnscControl, p3g: f64, q3g: f64, v_phase: &PhasorSet) -> Result<IbdgLinearization, SingularVoltage> {
    let s = phase_to_sequence(v_phase);
    check_vpos(s.positive)?;
    let (k1, k2, neg) = weights(s.negative, control.k1, control.k2);
    let (alpha, beta) = (control.alpha, control.beta);
    let j = Complex64::new(0.0, 1.0);
    let zero = Complex64::new(0.0, 0.0);

    // d(1/conj V)/dV_R = −1/conj(V)², d(1/conj V)/dV_I = j/conj(V)²
    let inv_sq = |v: Complex64| (v.conj() * v.conj()).inv();

    let mut sequence = [[zero; DEVICE_VARS]; 3];
    for p in Phase::ALL {
        let r = p.positive_rotation();
        let sr = p.negative_rotation();
        let cp = alpha * Complex64::new(k1 * p3g, -k2 * q3g) * r;
        let row = &mut sequence[p.index()];
        row[0] = -cp * inv_sq(s.positive) - beta * r;
        row[1] = j * cp * inv_sq(s.positive) - j * beta * r;
        row[2] = -beta * sr;
        row[3] = -j * beta * sr;
        row[4] = -beta;
        row[5] = -j * beta;
        row[6] = alpha * (-j * k2) * r / s.positive.conj();
        if neg {
            let cn = alpha * Complex64::new((1.0 - k1) * p3g, -(1.0 - k2) * q3g) * sr;
            row[2] += -cn * inv_sq(s.negative);
            row[3] += j * cn * inv_sq(s.negative);
            row[6] += alpha * (-j * (1.0 - k2)) * sr / s.negative.conj();
        }
    }

    // Sequence components as linear functions of the phase voltages.
    let third = 1.0 / 3.0;
    let coef = |phase: Phase| -> [Complex64; 3] {
        [
            phase.positive_rotation().conj() * third,
            phase.negative_rotation().conj() * third,
            Complex64::new(third, 0.0),
        ]
    };
    let mut phase = [[zero; DEVICE_VARS]; 3];
    for out in 0..3 {
        for vp in Phase::ALL {
            let c = coef(vp);
            let mut d_re = zero;
            let mut d_im = zero;
            for (k, ck) in c.iter().enumerate() {
                // y = ck·V_vp: ∂y_R/∂V_R = Re ck, ∂y_I/∂V_R = Im ck,
                //              ∂y_R/∂V_I = −Im ck, ∂y_I/∂V_I = Re ck.
                let (dr, di) = (sequence[out][2 * k], sequence[out][2 * k + 1]);
                d_re += dr * ck.re + di * ck.im;
                d_im += -dr * ck.im + di * ck.re;
            }
            phase[out][2 * vp.index()] = d_re;
            phase[out][2 * vp.index() + 1] = d_im;
        }
        phase[out][6] = sequence[out][6];
    }

    Ok(IbdgLinearization {
        currents: ibdg_injection(control, p3g, q3g, v_phase)?,
        sequence,
        phase,
    })
}

/// Coefficients of the closed-form peak-current expression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurrentLimitTerms {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub gamma: Gamma,
    pub vpos_mag: f64,
    pub vneg_mag: f64,
    /// Per-phase reactive-limit denominator B.
    pub b_term: [f64; 3],
}

impl CurrentLimitTerms {
    pub fn new(vpos: Complex64, vneg: Complex64, k1: f64, k2: f64) -> Result<Self, SingularVoltage> {
        check_vpos(vpos)?;
        let gamma = gamma_set(vpos, vneg);
        let (pm, nm) = (vpos.norm(), vneg.norm());
        let (k1, k2, neg) = weights(vneg, k1, k2);
        let (a1, a2, r1, r2) = if neg {
            (k1 / pm, (1.0 - k1) / nm, k2 / pm, (1.0 - k2) / nm)
        } else {
            (1.0 / pm, 0.0, 1.0 / pm, 0.0)
        };
        let b_term = gamma.values.map(|g| b_denominator(pm, nm, k2, g));
        Ok(CurrentLimitTerms {
            c1: a1 + a2,
            c2: r1 - r2,
            c3: r1 + r2,
            c4: a1 - a2,
            gamma,
            vpos_mag: pm,
            vneg_mag: nm,
            b_term,
        })
    }

    pub fn from_voltages(v: &PhasorSet, k1: f64, k2: f64) -> Result<Self, SingularVoltage> {
        let s = phase_to_sequence(v);
        Self::new(s.positive, s.negative, k1, k2)
    }

    /// Per-phase `(P coefficient, Q coefficient)` of the two squared terms.
    fn quadratic(&self, phase: usize) -> [[f64; 2]; 2] {
        let (s, c) = self.gamma.values[phase].sin_cos();
        [[self.c1 * c, -self.c2 * s], [-self.c4 * s, -self.c3 * c]]
    }
}

/// `k2²|V-|² + (1−k2)²|V+|² + 2 k2 (1−k2) |V-||V+| cos 2γ`.
///
/// This is the P = 0 reduction of the peak-current expression; the cross term
/// carries a plus sign under the half-angle γ convention.
fn b_denominator(vpos_mag: f64, vneg_mag: f64, k2: f64, gamma: f64) -> f64 {
    k2 * k2 * vneg_mag * vneg_mag + (1.0 - k2).powi(2) * vpos_mag * vpos_mag
        + 2.0 * k2 * (1.0 - k2) * vneg_mag * vpos_mag * (2.0 * gamma).cos()
}

/// Per-phase peak instantaneous current at the operating point `(p3g, q3g)`.
pub fn peak_current(terms: &CurrentLimitTerms, p3g: f64, q3g: f64) -> [f64; 3] {
    std::array::from_fn(|i| {
        let [[a, b], [c, d]] = terms.quadratic(i);
        let x = p3g * a + q3g * b;
        let y = p3g * c + q3g * d;
        (x * x + y * y).sqrt()
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QMax {
    pub value: f64,
    /// Phase whose current rating binds first.
    pub limiting_phase: Phase,
    pub per_phase: [f64; 3],
}

/// Largest three-phase reactive power (at zero active power) that keeps every
/// phase within `i_pk_allowed`:
/// `Q_max,φ = sqrt(I² |V+|² |V-|² / B_φ)`, minimised over phases.
pub fn q_max(i_pk_allowed: f64, vpos_mag: f64, vneg_mag: f64, k2: f64, gamma: &Gamma) -> Result<QMax, IbdgError> {
    if !(i_pk_allowed > 0.0) {
        return Err(IbdgError::BadRating(i_pk_allowed));
    }
    if vpos_mag < V_POS_MIN {
        return Err(SingularVoltage { magnitude: vpos_mag }.into());
    }
    if vneg_mag < EPS_SEQ || gamma.balanced {
        let q = i_pk_allowed * vpos_mag;
        return Ok(QMax {
            value: q,
            limiting_phase: Phase::A,
            per_phase: [q; 3],
        });
    }
    let mut per_phase = [f64::INFINITY; 3];
    for p in Phase::ALL {
        let b = b_denominator(vpos_mag, vneg_mag, k2, gamma.get(p));
        // B is a perfect square at cos 2γ = −1, so compare it with the size of its own terms.
        let floor = EPS_B * (k2 * vneg_mag + (1.0 - k2) * vpos_mag).powi(2);
        if b < -floor {
            return Err(IbdgError::Degenerate { b, phase: p });
        }
        if b > floor {
            per_phase[p.index()] = (i_pk_allowed * i_pk_allowed * vpos_mag * vpos_mag * vneg_mag * vneg_mag / b).sqrt();
        }
    }
    let limiting_phase = Phase::ALL
        .into_iter()
        .min_by(|a, b| per_phase[a.index()].total_cmp(&per_phase[b.index()]))
        .unwrap();
    Ok(QMax {
        value: per_phase[limiting_phase.index()],
        limiting_phase,
        per_phase,
    })
}

/// Symmetric reactive headroom `q` such that any `|Q| <= q` keeps every phase
/// within `i_allowed` while the device delivers `p3g`.
///
/// Solves the peak-current quadratic for Q on each phase; reduces to
/// [`q_max`] when `p3g == 0`. Returns zero when the active power alone already
/// exceeds the rating.
pub fn q_headroom(terms: &CurrentLimitTerms, p3g: f64, i_allowed: f64) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..3 {
        let [[a, b], [c, d]] = terms.quadratic(i);
        // (pa + qb)² + (pc + qd)² = I²
        let qa = b * b + d * d;
        let qb = p3g * (a * b + c * d);
        let qc = p3g * p3g * (a * a + c * c) - i_allowed * i_allowed;
        if qc > 0.0 {
            return 0.0;
        }
        if qa <= EPS_B * (a * a + c * c).max(f64::MIN_POSITIVE) {
            continue;
        }
        let disc = (qb * qb - qa * qc).max(0.0).sqrt();
        let hi = (-qb + disc) / qa;
        let lo = (-qb - disc) / qa;
        best = best.min(hi.min(-lo));
    }
    best.max(0.0)
}

/// Smooth clamp of `q_requested` to `[−q_max, q_max]`.
///
/// Identity on `|q| <= q_max − h`, a quadratic knee of half-width
/// `h = 0.02 q_max` that matches value and slope on both sides, and exact
/// saturation beyond `q_max + h`.
pub fn apply_q_limit(q_requested: f64, q_max: f64) -> f64 {
    apply_q_limit_with_slope(q_requested, q_max).0
}

/// [`apply_q_limit`] together with its derivative with respect to `q_requested`.
pub fn apply_q_limit_with_slope(q_requested: f64, q_max: f64) -> (f64, f64) {
    let qm = q_max.max(0.0);
    let h = Q_LIMIT_KNEE * qm;
    let x = q_requested.abs();
    let sign = q_requested.signum();
    let (y, slope) = if x <= qm - h {
        (x, 1.0)
    } else if x >= qm + h {
        (qm, 0.0)
    } else {
        let t = x - (qm - h);
        (x - t * t / (4.0 * h), 1.0 - t / (2.0 * h))
    };
    (sign * y, slope)
}
