//! Network data model and topology validation.
//!
//! All quantities are per-unit. Per-phase powers are expressed on the per-phase
//! base (`base_mva / 3`), while three-phase totals such as an IBDG's `p3g` are on
//! the three-phase base `base_mva`; with this convention a balanced per-phase
//! current of 1 pu at 1 pu voltage carries 1 pu of three-phase power.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

use num_complex::Complex64;

use crate::generator::PvGenerator;
use crate::ibdg::IbdgDevice;
use crate::sequence::{Phase, PhaseSet, PhasorSet};
use crate::stamp::{NodeLookup, StampEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BusKind {
    Slack,
    Load,
    Generator,
    IbdgAttachment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: u32,
    pub kind: BusKind,
    pub nominal_voltage: f64,
    pub phases: PhaseSet,
}

/// 3×3 complex matrix in the phase frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhaseMatrix(pub [[Complex64; 3]; 3]);

impl PhaseMatrix {
    pub fn zero() -> Self {
        PhaseMatrix::default()
    }

    pub fn diagonal(y: Complex64) -> Self {
        Self::self_mutual(y, Complex64::new(0.0, 0.0))
    }

    /// Equal self terms on the diagonal and equal mutual terms elsewhere.
    pub fn self_mutual(diag: Complex64, off: Complex64) -> Self {
        PhaseMatrix(std::array::from_fn(|i| {
            std::array::from_fn(|j| if i == j { diag } else { off })
        }))
    }

    pub fn get(&self, row: Phase, col: Phase) -> Complex64 {
        self.0[row.index()][col.index()]
    }

    pub fn mul_vec(&self, v: &PhasorSet) -> PhasorSet {
        PhasorSet(std::array::from_fn(|i| {
            (0..3).map(|j| self.0[i][j] * v.0[j]).sum()
        }))
    }

    pub fn add(&self, other: &PhaseMatrix) -> PhaseMatrix {
        PhaseMatrix(std::array::from_fn(|i| {
            std::array::from_fn(|j| self.0[i][j] + other.0[i][j])
        }))
    }

    pub fn scale(&self, s: f64) -> PhaseMatrix {
        PhaseMatrix(self.0.map(|row| row.map(|z| z * s)))
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.0
            .iter()
            .flatten()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let scale = self.max_abs().max(1.0);
        (0..3).all(|i| (0..3).all(|j| (self.0[i][j] - self.0[j][i]).norm() <= tol * scale))
    }

    /// Phases with any nonzero entry in their row or column.
    pub fn used_phases(&self) -> PhaseSet {
        let mut set = PhaseSet::EMPTY;
        for p in Phase::ALL {
            let i = p.index();
            if (0..3).any(|j| self.0[i][j] != Complex64::new(0.0, 0.0) || self.0[j][i] != Complex64::new(0.0, 0.0)) {
                set.insert(p);
            }
        }
        set
    }

    /// Inverse restricted to the sub-block of `phases`; rows and columns of
    /// other phases are zero in the result. Returns `None` if that block is
    /// singular.
    pub fn inverse_on(&self, phases: PhaseSet) -> Option<PhaseMatrix> {
        let idx: Vec<usize> = phases.iter().map(|p| p.index()).collect();
        let n = idx.len();
        let mut a: Vec<Vec<Complex64>> = idx
            .iter()
            .map(|&i| {
                let mut row: Vec<Complex64> = idx.iter().map(|&j| self.0[i][j]).collect();
                row.extend((0..n).map(|k| {
                    if idx[k] == i {
                        Complex64::new(1.0, 0.0)
                    } else {
                        Complex64::new(0.0, 0.0)
                    }
                }));
                row
            })
            .collect();
        let scale = self.max_abs();
        for col in 0..n {
            let pivot = (col..n).max_by(|&x, &y| a[x][col].norm().total_cmp(&a[y][col].norm()))?;
            if a[pivot][col].norm() <= 1e-14 * scale || scale == 0.0 {
                return None;
            }
            a.swap(col, pivot);
            let inv = a[col][col].inv();
            for v in a[col].iter_mut() {
                *v *= inv;
            }
            for r in 0..n {
                if r != col {
                    let f = a[r][col];
                    if f != Complex64::new(0.0, 0.0) {
                        for c in 0..2 * n {
                            let delta = f * a[col][c];
                            a[r][c] -= delta;
                        }
                    }
                }
            }
        }
        let mut out = PhaseMatrix::zero();
        for (r, &i) in idx.iter().enumerate() {
            for (c, &j) in idx.iter().enumerate() {
                out.0[i][j] = a[r][n + c];
            }
        }
        Some(out)
    }
}

/// Three-phase pi-section: the series admittance between the terminals plus a
/// total shunt admittance split equally between both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from_bus: u32,
    pub to_bus: u32,
    pub series_admittance: PhaseMatrix,
    pub shunt_admittance: PhaseMatrix,
}

impl Branch {
    pub fn phases(&self) -> PhaseSet {
        let mut set = self.series_admittance.used_phases();
        for p in self.shunt_admittance.used_phases().iter() {
            set.insert(p);
        }
        set
    }
}

/// Wye-connected constant-power load; per-phase values on the per-phase base.
/// A negative load is the classical negative-PQ model of a distributed generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantPowerLoad {
    pub bus: u32,
    pub p_per_phase: [f64; 3],
    pub q_per_phase: [f64; 3],
}

impl ConstantPowerLoad {
    pub fn phases(&self) -> PhaseSet {
        let mut set = PhaseSet::EMPTY;
        for p in Phase::ALL {
            if self.p_per_phase[p.index()] != 0.0 || self.q_per_phase[p.index()] != 0.0 {
                set.insert(p);
            }
        }
        set
    }

    pub fn power(&self, phase: Phase) -> Complex64 {
        Complex64::new(self.p_per_phase[phase.index()], self.q_per_phase[phase.index()])
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    loads: Vec<ConstantPowerLoad>,
    slack_voltage: PhasorSet,
    generators: Vec<PvGenerator>,
    ibdgs: Vec<IbdgDevice>,
    index: HashMap<u32, usize>,
}

impl Network {
    pub fn new(
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        loads: Vec<ConstantPowerLoad>,
        slack_voltage: PhasorSet,
        generators: Vec<PvGenerator>,
        ibdgs: Vec<IbdgDevice>,
    ) -> Self {
        let mut index = HashMap::new();
        for (i, b) in buses.iter().enumerate() {
            index.entry(b.id).or_insert(i);
        }
        Network {
            buses,
            branches,
            loads,
            slack_voltage,
            generators,
            ibdgs,
            index,
        }
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn loads(&self) -> &[ConstantPowerLoad] {
        &self.loads
    }

    pub fn slack_voltage(&self) -> &PhasorSet {
        &self.slack_voltage
    }

    pub fn generators(&self) -> &[PvGenerator] {
        &self.generators
    }

    pub fn ibdgs(&self) -> &[IbdgDevice] {
        &self.ibdgs
    }

    /// Dense position of the bus with the given id.
    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn bus(&self, id: u32) -> Option<&Bus> {
        self.bus_index(id).map(|i| &self.buses[i])
    }

    pub fn slack_index(&self) -> Option<usize> {
        self.buses.iter().position(|b| b.kind == BusKind::Slack)
    }

    /// Copy with every IBDG's active power multiplied by `factor`.
    pub fn with_ibdg_power_scale(&self, factor: f64) -> Network {
        let mut net = self.clone();
        for d in &mut net.ibdgs {
            d.p3g *= factor;
        }
        net
    }

    /// Copy with every load multiplied by `factor`.
    pub fn with_load_scale(&self, factor: f64) -> Network {
        let mut net = self.clone();
        for l in &mut net.loads {
            for i in 0..3 {
                l.p_per_phase[i] *= factor;
                l.q_per_phase[i] *= factor;
            }
        }
        net
    }

    /// Total load on the three-phase base (sum of per-phase powers / 3).
    pub fn total_load(&self) -> Complex64 {
        self.loads
            .iter()
            .flat_map(|l| Phase::ALL.map(|p| l.power(p)))
            .sum::<Complex64>()
            / 3.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    MissingSlack,
    MultipleSlack { ids: Vec<u32> },
    DuplicateBusId { id: u32 },
    UnknownBus { element: String, id: u32 },
    SelfLoop { branch: usize, bus: u32 },
    AsymmetricBranch { branch: usize },
    NonFiniteValue { element: String },
    BranchPhaseMismatch { branch: usize, bus: u32 },
    LoadPhaseMismatch { load: usize, bus: u32 },
    DisconnectedBus { id: u32 },
    IsolatedPhase { id: u32, phase: Phase },
    GeneratorAtSlack { element: String, bus: u32 },
    ConflictingVoltageControl { bus: u32 },
    IbdgNeedsThreePhases { ibdg: u32, bus: u32 },
    InvalidParameter { element: String, reason: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingSlack => write!(f, "missing slack bus"),
            Violation::MultipleSlack { ids } => write!(f, "multiple slack buses: {ids:?}"),
            Violation::DuplicateBusId { id } => write!(f, "duplicate bus id {id}"),
            Violation::UnknownBus { element, id } => {
                write!(f, "{element} references unknown bus {id}")
            }
            Violation::SelfLoop { branch, bus } => {
                write!(f, "self-loop: branch {branch} starts and ends at bus {bus}")
            }
            Violation::AsymmetricBranch { branch } => {
                write!(f, "branch {branch} has an asymmetric admittance matrix")
            }
            Violation::NonFiniteValue { element } => write!(f, "{element} has a non-finite value"),
            Violation::BranchPhaseMismatch { branch, bus } => {
                write!(f, "branch {branch} uses a phase absent at bus {bus}")
            }
            Violation::LoadPhaseMismatch { load, bus } => {
                write!(f, "load {load} uses a phase absent at bus {bus}")
            }
            Violation::DisconnectedBus { id } => write!(f, "disconnected bus {id}"),
            Violation::IsolatedPhase { id, phase } => {
                write!(f, "phase {phase} of bus {id} is not connected to the slack")
            }
            Violation::GeneratorAtSlack { element, bus } => {
                write!(f, "{element} is attached to the slack bus {bus}")
            }
            Violation::ConflictingVoltageControl { bus } => {
                write!(f, "more than one PV generator regulates bus {bus}")
            }
            Violation::IbdgNeedsThreePhases { ibdg, bus } => {
                write!(f, "ibdg {ibdg} needs phases ABC at bus {bus}")
            }
            Violation::InvalidParameter { element, reason } => write!(f, "{element}: {reason}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "  - {v}")?;
        }
        Ok(())
    }
}

/// Checks that a network is solvable. Violations are collected, never raised.
pub fn validate(network: &Network) -> ValidationReport {
    let mut v = Vec::new();

    let mut seen = HashSet::new();
    for b in network.buses() {
        if !seen.insert(b.id) {
            v.push(Violation::DuplicateBusId { id: b.id });
        }
        if !(b.nominal_voltage.is_finite() && b.nominal_voltage > 0.0) {
            v.push(Violation::InvalidParameter {
                element: format!("bus {}", b.id),
                reason: "nominal voltage must be positive".into(),
            });
        }
        if b.phases.is_empty() {
            v.push(Violation::InvalidParameter {
                element: format!("bus {}", b.id),
                reason: "no phases present".into(),
            });
        }
    }

    let slacks: Vec<u32> = network
        .buses()
        .iter()
        .filter(|b| b.kind == BusKind::Slack)
        .map(|b| b.id)
        .collect();
    match slacks.len() {
        0 => v.push(Violation::MissingSlack),
        1 => {}
        _ => v.push(Violation::MultipleSlack { ids: slacks.clone() }),
    }
    if !network.slack_voltage().is_finite() {
        v.push(Violation::NonFiniteValue {
            element: "slack voltage".into(),
        });
    }

    let bus_phases = |id: u32| network.bus(id).map(|b| b.phases);

    for (k, br) in network.branches().iter().enumerate() {
        let mut ok = true;
        for id in [br.from_bus, br.to_bus] {
            if network.bus(id).is_none() {
                v.push(Violation::UnknownBus {
                    element: format!("branch {k}"),
                    id,
                });
                ok = false;
            }
        }
        if br.from_bus == br.to_bus {
            v.push(Violation::SelfLoop {
                branch: k,
                bus: br.from_bus,
            });
            ok = false;
        }
        if !(br.series_admittance.is_finite() && br.shunt_admittance.is_finite()) {
            v.push(Violation::NonFiniteValue {
                element: format!("branch {k}"),
            });
        }
        if !(br.series_admittance.is_symmetric(1e-12) && br.shunt_admittance.is_symmetric(1e-12)) {
            v.push(Violation::AsymmetricBranch { branch: k });
        }
        if ok {
            for id in [br.from_bus, br.to_bus] {
                if !br.phases().is_subset(bus_phases(id).unwrap_or_default()) {
                    v.push(Violation::BranchPhaseMismatch { branch: k, bus: id });
                }
            }
        }
    }

    for (k, load) in network.loads().iter().enumerate() {
        match bus_phases(load.bus) {
            None => v.push(Violation::UnknownBus {
                element: format!("load {k}"),
                id: load.bus,
            }),
            Some(ph) => {
                if !load.phases().is_subset(ph) {
                    v.push(Violation::LoadPhaseMismatch { load: k, bus: load.bus });
                }
            }
        }
        let finite = load
            .p_per_phase
            .iter()
            .chain(&load.q_per_phase)
            .all(|x| x.is_finite());
        if !finite {
            v.push(Violation::NonFiniteValue {
                element: format!("load {k}"),
            });
        }
    }

    let slack_id = slacks.first().copied();
    let mut regulated = HashSet::new();
    for g in network.generators() {
        let element = format!("pv generator {}", g.id);
        if network.bus(g.bus).is_none() {
            v.push(Violation::UnknownBus { element, id: g.bus });
            continue;
        }
        if Some(g.bus) == slack_id {
            v.push(Violation::GeneratorAtSlack { element, bus: g.bus });
        } else if !regulated.insert(g.bus) {
            v.push(Violation::ConflictingVoltageControl { bus: g.bus });
        } else if let Err(reason) = g.check() {
            v.push(Violation::InvalidParameter { element, reason });
        }
    }

    for d in network.ibdgs() {
        let element = format!("ibdg {}", d.id);
        match network.bus(d.bus) {
            None => v.push(Violation::UnknownBus { element, id: d.bus }),
            Some(b) => {
                if Some(d.bus) == slack_id {
                    v.push(Violation::GeneratorAtSlack { element, bus: d.bus });
                } else if b.phases != PhaseSet::ABC {
                    v.push(Violation::IbdgNeedsThreePhases { ibdg: d.id, bus: d.bus });
                } else if let Err(reason) = d.check() {
                    v.push(Violation::InvalidParameter { element, reason });
                }
            }
        }
    }

    // Reachability of every (bus, phase) node from the slack through branch phases.
    if let Some(slack) = network.slack_index() {
        let n = network.buses().len();
        let mut adj: Vec<Vec<(usize, PhaseSet)>> = vec![Vec::new(); n];
        for br in network.branches() {
            if let (Some(f), Some(t)) = (network.bus_index(br.from_bus), network.bus_index(br.to_bus)) {
                if f != t {
                    let ph = br.series_admittance.used_phases();
                    adj[f].push((t, ph));
                    adj[t].push((f, ph));
                }
            }
        }
        let mut reached = vec![PhaseSet::EMPTY; n];
        let mut queue = VecDeque::new();
        for p in network.buses()[slack].phases.iter() {
            reached[slack].insert(p);
            queue.push_back((slack, p));
        }
        while let Some((b, p)) = queue.pop_front() {
            for &(nb, ph) in &adj[b] {
                if ph.contains(p) && !reached[nb].contains(p) {
                    reached[nb].insert(p);
                    queue.push_back((nb, p));
                }
            }
        }
        for (i, bus) in network.buses().iter().enumerate() {
            if network.bus_index(bus.id) != Some(i) {
                continue;
            }
            if reached[i].is_empty() {
                v.push(Violation::DisconnectedBus { id: bus.id });
            } else {
                for p in bus.phases.iter() {
                    if !reached[i].contains(p) {
                        v.push(Violation::IsolatedPhase { id: bus.id, phase: p });
                    }
                }
            }
        }
    }

    ValidationReport { violations: v }
}

/// Linear stamps of a branch between the dense buses `from` and `to`.
///
/// A complex admittance `y = g + jb` coupling node `i` to voltage `j` stamps
/// `g` into the real-real and imaginary-imaginary blocks, `-b` into
/// real-imaginary and `+b` into imaginary-real, which is the real embedding of
/// complex multiplication.
pub fn stamp_branch(branch: &Branch, from: usize, to: usize, nodes: &impl NodeLookup) -> Vec<StampEntry> {
    let mut out = Vec::new();
    let half_shunt = branch.shunt_admittance.scale(0.5);
    let own = branch.series_admittance.add(&half_shunt);
    for (this, other) in [(from, to), (to, from)] {
        for pr in Phase::ALL {
            let Some(row) = nodes.node(this, pr) else { continue };
            for pc in Phase::ALL {
                let pairs = [(this, own.get(pr, pc)), (other, -branch.series_admittance.get(pr, pc))];
                for (bus, y) in pairs {
                    if y == Complex64::new(0.0, 0.0) {
                        continue;
                    }
                    let Some(col) = nodes.node(bus, pc) else { continue };
                    push_embedded(&mut out, row.re, row.im, col.re, col.im, y);
                }
            }
        }
    }
    out
}

fn push_embedded(out: &mut Vec<StampEntry>, r_re: usize, r_im: usize, c_re: usize, c_im: usize, y: Complex64) {
    if y.re != 0.0 {
        out.push(StampEntry::matrix(r_re, c_re, y.re));
        out.push(StampEntry::matrix(r_im, c_im, y.re));
    }
    if y.im != 0.0 {
        out.push(StampEntry::matrix(r_re, c_im, -y.im));
        out.push(StampEntry::matrix(r_im, c_re, y.im));
    }
}
