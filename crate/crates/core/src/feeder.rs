//! Seeded synthetic radial feeders for desk-scale studies.
//!
//! The default layout has a 35-bus three-phase trunk and four laterals (one
//! three-phase, one phase-A, one phase-BC, one three-phase), 50 buses in all.
//! Every segment shares the same mutually coupled impedance; loads are wye,
//! constant power and unbalanced.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::case::{BranchSpec, BusKindSpec, BusSpec, CaseFile, IbdgSpec, LoadSpec, MatrixSpec, SelfMutualSpec, VoltVarSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Along the far end of the trunk.
    End,
    /// Around the middle of the trunk.
    Center,
    /// Evenly spread over all three-phase buses.
    Distributed,
}

impl Placement {
    pub const ALL: [Placement; 3] = [Placement::End, Placement::Center, Placement::Distributed];
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::End => "end",
            Placement::Center => "center",
            Placement::Distributed => "distributed",
        })
    }
}

impl FromStr for Placement {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "end" => Ok(Placement::End),
            "center" => Ok(Placement::Center),
            "distributed" => Ok(Placement::Distributed),
            _ => Err(format!("unknown placement {s:?} (end, center, distributed)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeederSpec {
    pub seed: u64,
    pub placement: Placement,
    pub n_ibdg: usize,
    /// Fraction of total feeder load supplied by the IBDGs together.
    pub penetration: f64,
    /// Mean per-phase load (pu) before randomization.
    pub mean_load: f64,
    pub k1: f64,
    pub k2: f64,
    /// Rating as a multiple of a device's full-penetration active power.
    pub rating_margin: f64,
}

impl Default for FeederSpec {
    fn default() -> Self {
        FeederSpec {
            seed: 7,
            placement: Placement::Distributed,
            n_ibdg: 10,
            penetration: 1.0,
            mean_load: 0.018,
            k1: 1.0,
            k2: 1.0,
            rating_margin: 1.2,
        }
    }
}

pub const TRUNK: u32 = 35;

/// `(parent bus, phases, bus count)` of each lateral.
const LATERALS: [(u32, &str, u32); 4] = [(10, "ABC", 4), (15, "A", 4), (22, "BC", 4), (28, "ABC", 3)];

/// Systematic per-phase load skew on top of the random spread.
const PHASE_BIAS: [f64; 3] = [1.3, 1.0, 0.7];

const Z_SELF: [f64; 2] = [0.003, 0.0065];
const Z_MUTUAL: [f64; 2] = [0.001, 0.003];

/// Builds the feeder case. IBDG active power is the full-penetration power
/// times `spec.penetration`; ratings and Volt/VAR curves use the full value.
pub fn synthetic_feeder(spec: &FeederSpec) -> CaseFile {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut case = CaseFile::new(1.0, 12.47);

    let z = MatrixSpec::SelfMutual(SelfMutualSpec { diag: Z_SELF, off: Z_MUTUAL });
    case.buses.push(BusSpec {
        id: 1,
        kind: BusKindSpec::Slack,
        nominal_voltage: 1.0,
        phases: "ABC".into(),
    });
    let push_bus = |case: &mut CaseFile, id: u32, parent: u32, phases: &str| {
        case.buses.push(BusSpec {
            id,
            kind: BusKindSpec::Load,
            nominal_voltage: 1.0,
            phases: phases.into(),
        });
        case.branches.push(BranchSpec {
            from: parent,
            to: id,
            phases: (phases != "ABC").then(|| phases.to_string()),
            y_series: None,
            z_series: Some(z.clone()),
            z_series_ohm: None,
            y_shunt: None,
        });
    };
    for id in 2..=TRUNK {
        push_bus(&mut case, id, id - 1, "ABC");
    }
    let mut next = TRUNK + 1;
    for (parent, phases, count) in LATERALS {
        let mut up = parent;
        for _ in 0..count {
            push_bus(&mut case, next, up, phases);
            up = next;
            next += 1;
        }
    }

    let mut total = 0.0;
    for b in case.buses.iter().skip(1) {
        let mut p = [0.0; 3];
        let mut q = [0.0; 3];
        for (i, ph) in "ABC".chars().enumerate() {
            if b.phases.contains(ph) {
                p[i] = spec.mean_load * PHASE_BIAS[i] * rng.gen_range(0.4..1.6);
                let pf: f64 = rng.gen_range(0.9..0.98);
                q[i] = p[i] * pf.acos().tan();
                total += p[i];
            }
        }
        case.loads.push(LoadSpec {
            bus: b.id,
            p: Some(p),
            q: Some(q),
            p_kw: None,
            q_kvar: None,
        });
    }

    let sites = ibdg_sites(spec.placement, spec.n_ibdg, &case);
    // Three-phase base.
    let p_full = total / 3.0 / spec.n_ibdg.max(1) as f64;
    for (k, &bus) in sites.iter().enumerate() {
        if let Some(b) = case.buses.iter_mut().find(|b| b.id == bus) {
            b.kind = BusKindSpec::Ibdg;
        }
        case.ibdgs.push(IbdgSpec {
            id: k as u32 + 1,
            bus,
            p3g: p_full * spec.penetration,
            k1: spec.k1,
            k2: spec.k2,
            alpha: [1.0, 0.0],
            beta: [0.0, 0.0],
            i_rating: spec.rating_margin * p_full,
            voltvar: VoltVarSpec::default(),
        });
    }
    case
}

fn ibdg_sites(placement: Placement, n: usize, case: &CaseFile) -> Vec<u32> {
    let three_phase: Vec<u32> = case
        .buses
        .iter()
        .filter(|b| b.phases == "ABC" && b.kind != BusKindSpec::Slack)
        .map(|b| b.id)
        .collect();
    let trunk: Vec<u32> = (2..=TRUNK).collect();
    let pick = |pool: &[u32], start: usize| -> Vec<u32> { pool.iter().skip(start).take(n).copied().collect() };
    match placement {
        Placement::End => pick(&trunk, trunk.len().saturating_sub(n)),
        Placement::Center => pick(&trunk, (trunk.len().saturating_sub(n)) / 2),
        Placement::Distributed => {
            let m = three_phase.len();
            (0..n.min(m)).map(|k| three_phase[(k * m + m / 2) / n]).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::validate;

    #[test]
    fn fifty_buses_ten_devices() {
        for placement in Placement::ALL {
            let case = synthetic_feeder(&FeederSpec {
                placement,
                ..Default::default()
            });
            assert_eq!(case.buses.len(), 50);
            assert_eq!(case.ibdgs.len(), 10);
            let mut sites: Vec<u32> = case.ibdgs.iter().map(|d| d.bus).collect();
            sites.sort();
            sites.dedup();
            assert_eq!(sites.len(), 10, "{placement}");
            let net = case.to_network().unwrap();
            assert!(validate(&net).is_ok(), "{}", validate(&net));
        }
    }

    #[test]
    fn penetration_scales_only_active_power() {
        let full = synthetic_feeder(&FeederSpec::default());
        let half = synthetic_feeder(&FeederSpec {
            penetration: 0.5,
            ..Default::default()
        });
        let total: f64 = full.ibdgs.iter().map(|d| d.p3g).sum();
        let net = full.to_network().unwrap();
        assert!((total - net.total_load().re).abs() < 1e-12);
        for (a, b) in full.ibdgs.iter().zip(&half.ibdgs) {
            assert_eq!(a.i_rating, b.i_rating);
            assert!((b.p3g - 0.5 * a.p3g).abs() < 1e-15);
        }
    }
}
