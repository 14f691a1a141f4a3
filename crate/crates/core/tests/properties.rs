mod common;

use common::*;
use ibdg_flow::case::{parse_case, serialize_case};
use ibdg_flow::feeder::{synthetic_feeder, FeederSpec, Placement};
use ibdg_flow::ibdg::*;
use ibdg_flow::sequence::*;
use ibdg_flow::solver::{kcl_residual, nr_solve, SolverOptions};
use ibdg_flow::voltvar::{build_curve, VoltVarBreakpoints};
use ibdg_flow::Complex64;
use proptest::prelude::*;

fn phasor() -> impl Strategy<Value = Complex64> {
    (0.0..1.5f64, -3.2..3.2f64).prop_map(|(m, a)| Complex64::from_polar(m, a))
}

fn phasor_set() -> impl Strategy<Value = PhasorSet> {
    (phasor(), phasor(), phasor()).prop_map(|(a, b, c)| PhasorSet::new(a, b, c))
}

/// Bus voltage with `|V+|` in [0.8, 1.1] and `|V-|/|V+|` in [0.005, 0.5].
fn bus_voltage() -> impl Strategy<Value = PhasorSet> {
    (0.8..1.1f64, -3.2..3.2f64, 0.005..0.5f64, -3.2..3.2f64, 0.0..0.05f64, -3.2..3.2f64).prop_map(|(mp, ap, r, an, m0, a0)| {
        sequence_to_phase(&SequenceSet::new(
            Complex64::from_polar(m0, a0),
            Complex64::from_polar(mp, ap),
            Complex64::from_polar(mp * r, an),
        ))
    })
}

fn control() -> impl Strategy<Value = FpnscControl> {
    (0.0..=1.0f64, 0.0..=1.0f64, 0.5..1.5f64, -0.2..0.2f64, -0.1..0.1f64, -0.1..0.1f64).prop_map(|(k1, k2, ar, ai, br, bi)| FpnscControl {
        k1,
        k2,
        alpha: Complex64::new(ar, ai),
        beta: Complex64::new(br, bi),
    })
}

proptest! {
    #[test]
    fn sequence_round_trip(v in phasor_set()) {
        let back = sequence_to_phase(&phase_to_sequence(&v));
        prop_assert!(back.max_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn split_recombines_to_injection(c in control(), v in bus_voltage(), p in 0.0..2.0f64, q in -1.0..1.0f64) {
        let split = ibdg_sequence_split(&c, p, q, &phase_to_sequence(&v)).unwrap().recombine();
        let direct = ibdg_injection(&c, p, q, &v).unwrap();
        let scale = direct.0.iter().map(|z| z.norm()).fold(1.0, f64::max);
        prop_assert!(split.max_abs_diff(&direct) <= 1e-12 * scale);
    }

    #[test]
    fn peak_formula_is_reference_magnitude(v in bus_voltage(), k1 in 0.0..=1.0f64, k2 in 0.0..=1.0f64, p in 0.0..2.0f64, q in -1.0..1.0f64) {
        let s = phase_to_sequence(&v);
        let i = fpnsc_reference(s.positive, s.negative, p, q, k1, k2).unwrap();
        let terms = CurrentLimitTerms::new(s.positive, s.negative, k1, k2).unwrap();
        let pk = peak_current(&terms, p, q);
        for ph in Phase::ALL {
            let m = i[ph].norm();
            prop_assert!((pk[ph.index()] - m).abs() <= 1e-9 * m.max(1.0));
        }
    }

    #[test]
    fn headroom_respects_rating(v in bus_voltage(), k1 in 0.0..=1.0f64, k2 in 0.0..=1.0f64, p in 0.0..1.0f64, rating in 0.5..3.0f64) {
        let terms = CurrentLimitTerms::from_voltages(&v, k1, k2).unwrap();
        let h = q_headroom(&terms, p, rating);
        prop_assert!(h >= 0.0);
        if h > 0.0 && h.is_finite() {
            for q in [h, -h, 0.5 * h] {
                let worst = peak_current(&terms, p, q).into_iter().fold(0.0, f64::max);
                prop_assert!(worst <= rating * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn q_max_equals_zero_power_headroom(v in bus_voltage(), k2 in 0.0..=1.0f64, rating in 0.5..3.0f64) {
        let terms = CurrentLimitTerms::from_voltages(&v, 1.0, k2).unwrap();
        let qm = q_max(rating, terms.vpos_mag, terms.vneg_mag, k2, &terms.gamma).unwrap();
        let h = q_headroom(&terms, 0.0, rating);
        prop_assert!((qm.value - h).abs() <= 1e-9 * qm.value, "{} vs {}", qm.value, h);
    }

    #[test]
    fn smooth_limit_is_monotone_and_bounded(qm in 0.01..2.0f64, a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (ylo, yhi) = (apply_q_limit(lo, qm), apply_q_limit(hi, qm));
        prop_assert!(ylo <= yhi);
        prop_assert!(yhi.abs() <= qm && ylo.abs() <= qm);
        let (_, slope) = apply_q_limit_with_slope(a, qm);
        prop_assert!((0.0..=1.0).contains(&slope));
    }

    #[test]
    fn voltvar_is_monotone_and_bounded(
        v1 in 0.85..0.95f64, d1 in 0.03..0.08f64, d2 in prop_oneof![Just(0.0), 0.025..0.06f64], d3 in 0.03..0.08f64,
        q_cap in 0.0..1.0f64, q_abs in -1.0..0.0f64, hw in 0.001..0.01f64, a in 0.5..1.5f64, b in 0.5..1.5f64,
    ) {
        let bp = VoltVarBreakpoints { v: [v1, v1 + d1, v1 + d1 + d2, v1 + d1 + d2 + d3], q_cap, q_abs, patch_halfwidth: hw };
        let curve = build_curve(&bp).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(curve.eval(lo) >= curve.eval(hi) - 1e-15);
        for x in [lo, hi] {
            let y = curve.eval(x);
            prop_assert!(y <= q_cap + 1e-15 && y >= q_abs - 1e-15);
            prop_assert!(curve.eval_derivative(x) <= 1e-15);
        }
    }

    #[test]
    fn balanced_bpsc_current_is_balanced(m in 0.8..1.1f64, ang in -3.2..3.2f64, p in 0.0..2.0f64, q in -1.0..1.0f64) {
        let v = PhasorSet::balanced(m, ang);
        let i = ibdg_injection(&FpnscControl::default(), p, q, &v).unwrap();
        let s = phase_to_sequence(&i);
        prop_assert!(s.negative.norm() < 1e-12 && s.zero.norm() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn converged_two_bus_satisfies_kcl(pa in 0.0..0.8f64, pb in 0.0..0.8f64, pc in 0.0..0.8f64, pf in 0.0..0.5f64) {
        let p = [pa, pb, pc];
        let net = two_bus(p, p.map(|x| x * pf));
        let r = nr_solve(&net, &SolverOptions::default()).unwrap();
        prop_assert!(r.converged);
        let kcl = kcl_residual(&net, &r.voltages, &r.q_pv, &r.q3g).unwrap();
        prop_assert!(kcl.iter().flat_map(|s| s.0).all(|z| z.norm() < 1e-8));
    }

    #[test]
    fn synthetic_cases_round_trip(seed in 0..1000u64, pen in 0.0..1.0f64, which in 0..3usize) {
        let case = synthetic_feeder(&FeederSpec { seed, penetration: pen, placement: Placement::ALL[which], ..Default::default() });
        let text = serialize_case(&case);
        prop_assert_eq!(parse_case(&text).unwrap(), case);
    }
}
