//! Conventional wye-connected PV-bus generator: per-phase real and imaginary
//! current sources, the squared-magnitude voltage control equation, and the
//! PV/PQ switching heuristic kept as a comparison baseline.

use num_complex::Complex64;

use crate::sequence::{Phase, PhaseSet};
use crate::stamp::{CurrentLinearization, NodeIndex, ScalarLinearization, StampEntry};
use crate::SingularVoltage;

/// Voltage magnitude below which current-source equations are not evaluated.
pub const V_SINGULAR: f64 = 1e-12;

/// Number of mode changes after which the switching baseline freezes a generator.
pub const N_TOGGLE: u32 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct PvGenerator {
    pub id: u32,
    pub bus: u32,
    /// Active power injected on every present phase (per-phase base).
    pub p_per_phase: f64,
    /// Voltage magnitude setpoint of every present phase.
    pub v_setpoint: f64,
    pub q_min: Option<f64>,
    pub q_max: Option<f64>,
}

impl PvGenerator {
    pub fn check(&self) -> Result<(), String> {
        if !(self.p_per_phase.is_finite() && self.v_setpoint.is_finite() && self.v_setpoint > 0.0) {
            return Err("active power must be finite and the setpoint positive".into());
        }
        if let (Some(lo), Some(hi)) = (self.q_min, self.q_max) {
            if lo > hi {
                return Err(format!("q_min {lo} exceeds q_max {hi}"));
            }
        }
        Ok(())
    }

    pub fn has_limits(&self) -> bool {
        self.q_min.is_some() || self.q_max.is_some()
    }
}

/// Injected current `conj((p + jq) / v)`, split as
/// `I_R = (p·V_R + q·V_I)/|V|²`, `I_I = (p·V_I − q·V_R)/|V|²`.
pub fn pv_current_injection(p: f64, q: f64, v: Complex64) -> Result<Complex64, SingularVoltage> {
    let m2 = v.norm_sqr();
    if m2.sqrt() < V_SINGULAR {
        return Err(SingularVoltage { magnitude: m2.sqrt() });
    }
    Ok(Complex64::new((p * v.re + q * v.im) / m2, (p * v.im - q * v.re) / m2))
}

/// First-order model of [`pv_current_injection`] about `v_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PvPartials {
    pub current: Complex64,
    /// `∂I_R/∂V_R + j ∂I_I/∂V_R`
    pub d_vr: Complex64,
    /// `∂I_R/∂V_I + j ∂I_I/∂V_I`
    pub d_vi: Complex64,
    /// `∂I_R/∂Q + j ∂I_I/∂Q`
    pub d_q: Complex64,
}

pub fn pv_linearize(p: f64, q_state: f64, v_k: Complex64) -> Result<PvPartials, SingularVoltage> {
    let current = pv_current_injection(p, q_state, v_k)?;
    let (vr, vi) = (v_k.re, v_k.im);
    let m2 = v_k.norm_sqr();
    let m4 = m2 * m2;
    // Quotient rule on the two rectangular expressions.
    let nr = p * vr + q_state * vi;
    let ni = p * vi - q_state * vr;
    let d_vr = Complex64::new(p / m2 - 2.0 * vr * nr / m4, -q_state / m2 - 2.0 * vr * ni / m4);
    let d_vi = Complex64::new(q_state / m2 - 2.0 * vi * nr / m4, p / m2 - 2.0 * vi * ni / m4);
    let d_q = Complex64::new(vi / m2, -vr / m2);
    Ok(PvPartials {
        current,
        d_vr,
        d_vi,
        d_q,
    })
}

impl PvPartials {
    /// Binds the partials to unknown indices. `q_col` is `None` for a
    /// fixed-power source (a load).
    pub fn bind(&self, node: NodeIndex, v_k: Complex64, q_col: Option<(usize, f64)>) -> CurrentLinearization {
        let mut partials = vec![(node.re, v_k.re, self.d_vr), (node.im, v_k.im, self.d_vi)];
        if let Some((col, q_k)) = q_col {
            partials.push((col, q_k, self.d_q));
        }
        CurrentLinearization {
            current: self.current,
            partials,
        }
    }

    /// Stamps for a generator injecting into `node` (injections leave the KCL
    /// row with a negative sign).
    pub fn stamps(&self, node: NodeIndex, v_k: Complex64, q_col: usize, q_k: f64) -> Vec<StampEntry> {
        let mut out = Vec::new();
        self.bind(node, v_k, Some((q_col, q_k))).stamps(node, -1.0, &mut out);
        out
    }
}

/// `|V|² − V_set²`.
///
/// The control equation is kept in squared form on both sides so that the
/// setpoint and the state have the same dimension.
pub fn voltage_control_residual(v: Complex64, v_setpoint: f64) -> f64 {
    v.norm_sqr() - v_setpoint * v_setpoint
}

pub fn voltage_control_linearize(v: Complex64, v_setpoint: f64, node: NodeIndex) -> ScalarLinearization {
    ScalarLinearization {
        value: voltage_control_residual(v, v_setpoint),
        gradient: vec![(node.re, v.re, 2.0 * v.re), (node.im, v.im, 2.0 * v.im)],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PvMode {
    /// Voltage regulated, Q free.
    Pv,
    /// Q pinned at `q_max`, voltage free.
    PqAtMax,
    /// Q pinned at `q_min`, voltage free.
    PqAtMin,
}

/// Per-generator state of the PV/PQ switching outer loop.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchState {
    pub modes: [PvMode; 3],
    pub toggles: u32,
    /// Set once the toggle budget is exhausted; modes no longer change.
    pub flagged: bool,
}

impl Default for SwitchState {
    fn default() -> Self {
        SwitchState {
            modes: [PvMode::Pv; 3],
            toggles: 0,
            flagged: false,
        }
    }
}

impl SwitchState {
    pub fn mode(&self, phase: Phase) -> PvMode {
        self.modes[phase.index()]
    }
}

/// One outer-loop update after an inner solve converged with the current modes.
///
/// A PV phase whose Q violates a limit is pinned at that limit. A pinned phase
/// returns to PV when its voltage error indicates the limit is no longer
/// needed: above the setpoint while pinned at `q_max`, below it while pinned at
/// `q_min`. Returns whether any mode changed. Once [`N_TOGGLE`] changes have
/// happened, a further requested change freezes the generator and flags it.
pub fn pvpq_switch_step(
    gen: &PvGenerator,
    phases: PhaseSet,
    state: &mut SwitchState,
    q: [f64; 3],
    vmag: [f64; 3],
) -> bool {
    if state.flagged {
        return false;
    }
    let mut next = state.modes;
    for p in phases.iter() {
        let i = p.index();
        next[i] = match state.modes[i] {
            PvMode::Pv => match (gen.q_min, gen.q_max) {
                (_, Some(hi)) if q[i] > hi => PvMode::PqAtMax,
                (Some(lo), _) if q[i] < lo => PvMode::PqAtMin,
                _ => PvMode::Pv,
            },
            PvMode::PqAtMax if vmag[i] > gen.v_setpoint => PvMode::Pv,
            PvMode::PqAtMin if vmag[i] < gen.v_setpoint => PvMode::Pv,
            m => m,
        };
    }
    if next == state.modes {
        return false;
    }
    if state.toggles >= N_TOGGLE {
        state.flagged = true;
        return false;
    }
    state.modes = next;
    state.toggles += 1;
    true
}

/// Pinned reactive power for a PQ-mode phase.
pub fn pinned_q(gen: &PvGenerator, mode: PvMode) -> Option<f64> {
    match mode {
        PvMode::Pv => None,
        PvMode::PqAtMax => gen.q_max,
        PvMode::PqAtMin => gen.q_min,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn injection_examples() {
        assert_eq!(pv_current_injection(1.0, 0.0, c(1.0, 0.0)).unwrap(), c(1.0, 0.0));
        assert_eq!(pv_current_injection(0.0, 1.0, c(0.0, 1.0)).unwrap(), c(1.0, 0.0));
        assert!(pv_current_injection(1.0, 1.0, c(0.0, 0.0)).is_err());
    }

    #[test]
    fn injection_matches_complex_division() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let p = rng.gen_range(-2.0..2.0);
            let q = rng.gen_range(-2.0..2.0);
            let v = Complex64::from_polar(rng.gen_range(0.5..1.5), rng.gen_range(-3.0..3.0));
            let want = (c(p, q) / v).conj();
            let got = pv_current_injection(p, q, v).unwrap();
            assert!((got - want).norm() < 1e-12);
        }
    }

    #[test]
    fn resistive_derivative_at_unity() {
        let d = pv_linearize(1.0, 0.0, c(1.0, 0.0)).unwrap();
        assert!((d.d_vr.re + 1.0).abs() < 1e-15);
    }

    fn fd(f: impl Fn(f64) -> Complex64, x: f64) -> Complex64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel(a: Complex64, b: Complex64) -> f64 {
        (a - b).norm() / a.norm().max(1.0)
    }

    #[test]
    fn partials_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let p = rng.gen_range(-2.0..2.0);
            let q = rng.gen_range(-2.0..2.0);
            let v = Complex64::from_polar(rng.gen_range(0.5..1.5), rng.gen_range(-3.2..3.2));
            let d = pv_linearize(p, q, v).unwrap();
            for z in [d.current, d.d_vr, d.d_vi, d.d_q] {
                assert!(z.re.is_finite() && z.im.is_finite());
            }
            let f_vr = fd(|x| pv_current_injection(p, q, c(x, v.im)).unwrap(), v.re);
            let f_vi = fd(|x| pv_current_injection(p, q, c(v.re, x)).unwrap(), v.im);
            let f_q = fd(|x| pv_current_injection(p, x, v).unwrap(), q);
            assert!(rel(d.d_vr, f_vr) < 1e-6);
            assert!(rel(d.d_vi, f_vi) < 1e-6);
            assert!(rel(d.d_q, f_q) < 1e-6);
        }
    }

    #[test]
    fn linear_model_is_exact_at_expansion_point() {
        let v = c(0.97, -0.12);
        let d = pv_linearize(0.4, 0.1, v).unwrap();
        let node = NodeIndex { re: 0, im: 1 };
        let lin = d.bind(node, v, Some((2, 0.1)));
        let x = [v.re, v.im, 0.1];
        assert_eq!(lin.eval_linear(|j| x[j]), pv_current_injection(0.4, 0.1, v).unwrap());
    }

    #[test]
    fn voltage_residual_examples() {
        assert_eq!(voltage_control_residual(c(1.0, 0.0), 1.0), 0.0);
        assert!(voltage_control_residual(c(0.6, 0.8), 1.0).abs() < 1e-15);
        assert!((voltage_control_residual(c(1.1, 0.0), 1.0) - 0.21).abs() < 1e-12);
    }

    fn limited() -> PvGenerator {
        PvGenerator {
            id: 1,
            bus: 2,
            p_per_phase: 0.0,
            v_setpoint: 1.0,
            q_min: Some(-0.2),
            q_max: Some(0.2),
        }
    }

    #[test]
    fn switch_interior_is_unchanged() {
        let mut s = SwitchState::default();
        assert!(!pvpq_switch_step(&limited(), PhaseSet::ABC, &mut s, [0.1; 3], [1.0; 3]));
        assert_eq!(s.modes, [PvMode::Pv; 3]);
    }

    #[test]
    fn switch_pins_at_limit() {
        let g = limited();
        let mut s = SwitchState::default();
        assert!(pvpq_switch_step(&g, PhaseSet::ABC, &mut s, [0.3, 0.1, -0.5], [1.0; 3]));
        assert_eq!(s.modes, [PvMode::PqAtMax, PvMode::Pv, PvMode::PqAtMin]);
        assert_eq!(pinned_q(&g, s.modes[0]), Some(0.2));
        // Voltage still below setpoint while pinned at q_max: stays PQ.
        assert!(!pvpq_switch_step(&g, PhaseSet::ABC, &mut s, [0.2, 0.1, -0.2], [0.98, 1.0, 1.02]));
    }

    #[test]
    fn switch_freezes_after_toggle_budget() {
        let g = limited();
        let mut s = SwitchState::default();
        let mut toggles = 0;
        for k in 0..20 {
            // Alternate between a PV solve above q_max and a PQ solve above setpoint.
            let changed = if k % 2 == 0 {
                pvpq_switch_step(&g, PhaseSet::ABC, &mut s, [0.5; 3], [1.0; 3])
            } else {
                pvpq_switch_step(&g, PhaseSet::ABC, &mut s, [0.2; 3], [1.02; 3])
            };
            if changed {
                toggles += 1;
            }
            if s.flagged {
                break;
            }
        }
        assert!(s.flagged);
        assert_eq!(toggles, N_TOGGLE);
        assert_eq!(s.toggles, N_TOGGLE);
    }
}
