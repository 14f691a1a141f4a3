#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::PathBuf;

use ibdg_flow::case::load_case;
use ibdg_flow::generator::PvGenerator;
use ibdg_flow::ibdg::{FpnscControl, IbdgDevice};
use ibdg_flow::network::{Branch, Bus, BusKind, ConstantPowerLoad, Network, PhaseMatrix};
use ibdg_flow::sequence::{sequence_to_phase, PhaseSet, PhasorSet, SequenceSet};
use ibdg_flow::voltvar::{build_curve, VoltVarBreakpoints};
use ibdg_flow::Complex64;
use rand::Rng;

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn bus(id: u32, kind: BusKind) -> Bus {
    Bus {
        id,
        kind,
        nominal_voltage: 1.0,
        phases: PhaseSet::ABC,
    }
}

pub fn line(from: u32, to: u32, z: PhaseMatrix) -> Branch {
    Branch {
        from_bus: from,
        to_bus: to,
        series_admittance: z.inverse_on(PhaseSet::ABC).unwrap(),
        shunt_admittance: PhaseMatrix::zero(),
    }
}

pub fn coupled_z() -> PhaseMatrix {
    PhaseMatrix::self_mutual(c(0.02, 0.05), c(0.006, 0.02))
}

/// Slack, one coupled line and an unbalanced constant-power load.
pub fn two_bus(p: [f64; 3], q: [f64; 3]) -> Network {
    Network::new(
        vec![bus(1, BusKind::Slack), bus(2, BusKind::Load)],
        vec![line(1, 2, coupled_z())],
        vec![ConstantPowerLoad {
            bus: 2,
            p_per_phase: p,
            q_per_phase: q,
        }],
        PhasorSet::balanced(1.0, 0.0),
        vec![],
        vec![],
    )
}

pub fn ibdg(id: u32, bus: u32, p3g: f64, i_rating: f64) -> IbdgDevice {
    IbdgDevice {
        id,
        bus,
        p3g,
        control: FpnscControl::default(),
        i_rating,
        voltvar: build_curve(&VoltVarBreakpoints::auto(i_rating)).unwrap(),
    }
}

/// Series-capacitive line where more reactive injection lowers the terminal
/// voltage; a limited PV generator asking for 0.95 pu flips between its
/// limit and voltage control.
pub fn oscillating_pv() -> Network {
    let g = PvGenerator {
        id: 1,
        bus: 2,
        p_per_phase: 0.0,
        v_setpoint: 0.95,
        q_min: Some(-0.2),
        q_max: Some(0.2),
    };
    Network::new(
        vec![bus(1, BusKind::Slack), bus(2, BusKind::Generator)],
        vec![line(1, 2, PhaseMatrix::diagonal(c(0.01, -0.1)))],
        vec![],
        PhasorSet::balanced(1.0, 0.0),
        vec![g],
        vec![],
    )
}

/// The same line with an IBDG on its Volt/VAR curve in place of the generator.
pub fn oscillating_pv_as_ibdg() -> Network {
    Network::new(
        vec![bus(1, BusKind::Slack), bus(2, BusKind::IbdgAttachment)],
        vec![line(1, 2, PhaseMatrix::diagonal(c(0.01, -0.1)))],
        vec![],
        PhasorSet::balanced(1.0, 0.0),
        vec![],
        vec![ibdg(1, 2, 0.0, 0.6)],
    )
}

/// Four-bus unbalanced network with a PV generator and an FPNSC IBDG. The
/// source is strongly unbalanced: with `k < 1` the negative-sequence current
/// grows like `1/|V-|` and has no solution on a nearly balanced bus.
pub fn mixed_four_bus(k1: f64, k2: f64) -> Network {
    let mut d = ibdg(1, 4, 0.05, 0.3);
    d.control.k1 = k1;
    d.control.k2 = k2;
    d.control.alpha = c(0.95, 0.03);
    d.control.beta = c(0.01, -0.02);
    Network::new(
        vec![bus(1, BusKind::Slack), bus(2, BusKind::Load), bus(3, BusKind::Generator), bus(4, BusKind::IbdgAttachment)],
        vec![line(1, 2, coupled_z()), line(2, 3, coupled_z()), line(2, 4, coupled_z())],
        vec![
            ConstantPowerLoad {
                bus: 2,
                p_per_phase: [0.3, 0.15, 0.2],
                q_per_phase: [0.1, 0.05, 0.08],
            },
            ConstantPowerLoad {
                bus: 4,
                p_per_phase: [0.1, 0.2, 0.05],
                q_per_phase: [0.03, 0.05, 0.02],
            },
        ],
        PhasorSet::from_polar_deg([1.0, 0.86, 1.07], [0.0, -125.0, 116.0]),
        vec![PvGenerator {
            id: 1,
            bus: 3,
            p_per_phase: 0.1,
            v_setpoint: 0.99,
            q_min: None,
            q_max: None,
        }],
        vec![d],
    )
}

pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("corpus")
}

pub fn corpus_files() -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(corpus_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    files.sort();
    files
}

pub fn corpus_network(name: &str) -> Network {
    let text = std::fs::read_to_string(corpus_dir().join(name)).unwrap();
    load_case(&text).unwrap().1
}

/// Random bus voltage with `|V-|/|V+|` up to `max_ratio` and a small zero sequence.
pub fn random_voltage(rng: &mut impl Rng, max_ratio: f64) -> PhasorSet {
    let vp = Complex64::from_polar(rng.gen_range(0.85..1.1), rng.gen_range(-0.5..0.5));
    let vn = Complex64::from_polar(vp.norm() * rng.gen_range(0.01..max_ratio), rng.gen_range(-PI..PI));
    let v0 = Complex64::from_polar(rng.gen_range(0.0..0.05), rng.gen_range(-PI..PI));
    sequence_to_phase(&SequenceSet::new(v0, vp, vn))
}
