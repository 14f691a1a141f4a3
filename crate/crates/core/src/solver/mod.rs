//! Newton-Raphson on the equivalent-circuit formulation.
//!
//! Each iteration linearizes every device at the current iterate and solves the
//! companion system `J·x_new = J·x_k − F(x_k)` assembled from stamps. The
//! unknowns are the rectangular node voltages, one reactive power per PV
//! generator phase, and one three-phase Q3G per IBDG. Slack nodes keep their
//! unknowns with identity rows.

pub mod sparse;

use std::fmt;

use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::generator::{pinned_q, pv_linearize, pvpq_switch_step, voltage_control_linearize, PvMode, SwitchState};
use crate::ibdg::{ibdg_linearize, q_headroom, CurrentLimitTerms};
use crate::network::{stamp_branch, validate, BusKind, Network, ValidationReport};
use crate::sequence::{phase_to_sequence, Phase, PhasorSet};
use crate::stamp::{CurrentLinearization, NodeIndex, NodeLookup, ScalarLinearization, StampEntry, StampTarget};
use crate::voltvar::voltvar_residual;
use sparse::SparseMatrix;

/// Largest voltage magnitude accepted before an iterate is declared divergent.
pub const V_DIVERGED: f64 = 10.0;

/// Smallest homotopy step before the continuation gives up.
pub const MIN_LAMBDA_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Part {
    Re,
    Im,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Unknown {
    Voltage { bus: u32, phase: Phase, part: Part },
    QPv { generator: u32, phase: Phase },
    Q3g { ibdg: u32 },
}

impl fmt::Display for Unknown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Unknown::Voltage { bus, phase, part } => {
                let p = if *part == Part::Re { "re" } else { "im" };
                write!(f, "V{p}(bus {bus}, phase {phase})")
            }
            Unknown::QPv { generator, phase } => write!(f, "Q(generator {generator}, phase {phase})"),
            Unknown::Q3g { ibdg } => write!(f, "Q3G(ibdg {ibdg})"),
        }
    }
}

/// Bijection between unknowns and matrix rows/columns.
#[derive(Debug, Clone, PartialEq)]
pub struct UnknownMap {
    unknowns: Vec<Unknown>,
    nodes: Vec<[Option<NodeIndex>; 3]>,
    q_pv: Vec<[Option<usize>; 3]>,
    q3g: Vec<usize>,
}

impl UnknownMap {
    pub fn new(net: &Network) -> Self {
        let mut unknowns = Vec::new();
        let mut nodes = Vec::with_capacity(net.buses().len());
        for bus in net.buses() {
            let mut row = [None; 3];
            for p in bus.phases.iter() {
                let re = unknowns.len();
                unknowns.push(Unknown::Voltage { bus: bus.id, phase: p, part: Part::Re });
                unknowns.push(Unknown::Voltage { bus: bus.id, phase: p, part: Part::Im });
                row[p.index()] = Some(NodeIndex { re, im: re + 1 });
            }
            nodes.push(row);
        }
        let mut q_pv = Vec::new();
        for g in net.generators() {
            let mut row = [None; 3];
            if let Some(b) = net.bus(g.bus) {
                for p in b.phases.iter() {
                    row[p.index()] = Some(unknowns.len());
                    unknowns.push(Unknown::QPv { generator: g.id, phase: p });
                }
            }
            q_pv.push(row);
        }
        let mut q3g = Vec::new();
        for d in net.ibdgs() {
            q3g.push(unknowns.len());
            unknowns.push(Unknown::Q3g { ibdg: d.id });
        }
        UnknownMap { unknowns, nodes, q_pv, q3g }
    }

    pub fn len(&self) -> usize {
        self.unknowns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unknowns.is_empty()
    }

    pub fn unknown(&self, index: usize) -> Unknown {
        self.unknowns[index]
    }

    pub fn index_of(&self, u: Unknown) -> Option<usize> {
        self.unknowns.iter().position(|&x| x == u)
    }

    pub fn q_pv(&self, generator: usize, phase: Phase) -> Option<usize> {
        self.q_pv[generator][phase.index()]
    }

    pub fn q3g(&self, ibdg: usize) -> usize {
        self.q3g[ibdg]
    }

    /// Indices of all voltage unknowns.
    pub fn voltage_indices(&self) -> impl Iterator<Item = NodeIndex> + '_ {
        self.nodes.iter().flat_map(|r| r.iter().flatten().copied())
    }

    fn voltage(&self, x: &[f64], bus: usize, phase: Phase) -> Complex64 {
        match self.nodes[bus][phase.index()] {
            Some(n) => Complex64::new(x[n.re], x[n.im]),
            None => Complex64::new(0.0, 0.0),
        }
    }

    fn bus_voltages(&self, x: &[f64], bus: usize) -> PhasorSet {
        PhasorSet(Phase::ALL.map(|p| self.voltage(x, bus, p)))
    }
}

impl NodeLookup for UnknownMap {
    fn node(&self, bus: usize, phase: Phase) -> Option<NodeIndex> {
        self.nodes.get(bus).and_then(|r| r[phase.index()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Max-norm tolerance on the Newton update.
    pub tol: f64,
    pub max_iter: usize,
    /// Largest change of any complex node voltage per iteration.
    pub v_step_max: f64,
    /// Initial number of source-stepping increments; 1 tries the full problem first.
    pub homotopy_steps: usize,
    /// Fraction of the first Newton update applied to device Q unknowns; the
    /// fraction recovers toward one geometrically.
    pub q_relax: f64,
    /// Max-norm tolerance on the nonlinear KCL and device residuals.
    pub kcl_tol: f64,
    /// Largest accepted change of an IBDG reactive limit between the last two iterates.
    pub qmax_tol: f64,
    /// Run the PV/PQ switching outer loop for generators with Q limits.
    pub pvpq_switching: bool,
    pub homotopy: bool,
    /// Assemble device stamps on the rayon pool.
    pub parallel_assembly: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-8,
            max_iter: 50,
            v_step_max: 0.1,
            homotopy_steps: 1,
            q_relax: 1.0,
            kcl_tol: 1e-9,
            qmax_tol: 1e-6,
            pvpq_switching: false,
            homotopy: false,
            parallel_assembly: false,
        }
    }
}

impl SolverOptions {
    pub fn check(&self) -> Result<(), SolveError> {
        let bad = |s: &str| Err(SolveError::BadOptions(s.to_string()));
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if self.max_iter < 1 {
            return bad("max_iter must be at least 1");
        }
        if !(self.v_step_max > 0.0) {
            return bad("v_step_max must be positive");
        }
        if self.homotopy_steps < 1 {
            return bad("homotopy_steps must be at least 1");
        }
        if !(self.q_relax > 0.0 && self.q_relax <= 1.0) {
            return bad("q_relax must lie in (0, 1]");
        }
        if !(self.kcl_tol > 0.0 && self.qmax_tol > 0.0) {
            return bad("residual tolerances must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("network is not solvable:\n{0}")]
    Invalid(ValidationReport),
    #[error("singular Jacobian: zero pivot at unknown {unknown}")]
    SingularMatrix { unknown: Unknown },
    #[error("device at bus {bus} evaluated at voltage magnitude {magnitude:e}")]
    SingularVoltage { bus: u32, magnitude: f64 },
    #[error("invalid solver options: {0}")]
    BadOptions(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub update_norm: f64,
    pub kcl_norm: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub bus_ids: Vec<u32>,
    /// Per bus in network order; absent phases are zero.
    pub voltages: Vec<PhasorSet>,
    /// Per generator, per phase.
    pub q_pv: Vec<[f64; 3]>,
    pub q3g: Vec<f64>,
    /// Reactive limit of each IBDG at the final iterate.
    pub q_max: Vec<f64>,
    /// Newton iterations summed over every stage.
    pub iterations: usize,
    /// KCL max-norm at the final iterate.
    pub final_residual: f64,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    pub homotopy_path: Vec<f64>,
    /// Largest source-stepping factor solved successfully.
    pub lambda_reached: f64,
    /// Ids of generators frozen by the PV/PQ oscillation detector.
    pub pvpq_flagged: Vec<u32>,
    pub pvpq_toggles: Vec<u32>,
    /// Raw unknown vector, usable as a warm start.
    pub state: Vec<f64>,
}

impl SolveResult {
    pub fn voltage(&self, bus_id: u32) -> Option<&PhasorSet> {
        self.bus_ids.iter().position(|&b| b == bus_id).map(|i| &self.voltages[i])
    }
}

/// The nonlinear system at a fixed source-stepping factor, reactive limits and
/// generator modes.
#[derive(Debug, Clone)]
pub struct SystemModel<'a> {
    pub net: &'a Network,
    pub map: &'a UnknownMap,
    pub lambda: f64,
    /// Frozen reactive limit per IBDG.
    pub q_limits: Vec<f64>,
    pub modes: Vec<[PvMode; 3]>,
    pub parallel: bool,
}

type DeviceResult<T> = Result<T, SolveError>;

impl<'a> SystemModel<'a> {
    pub fn new(net: &'a Network, map: &'a UnknownMap, lambda: f64) -> Self {
        SystemModel {
            net,
            map,
            lambda,
            q_limits: vec![0.0; net.ibdgs().len()],
            modes: vec![[PvMode::Pv; 3]; net.generators().len()],
            parallel: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.map.len()
    }

    /// Flat start: every node at its phase of the slack setpoint, Q unknowns at zero.
    pub fn flat_start(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        let vs = self.net.slack_voltage();
        for (b, row) in self.map.nodes.iter().enumerate() {
            let _ = b;
            for p in Phase::ALL {
                if let Some(n) = row[p.index()] {
                    x[n.re] = vs[p].re;
                    x[n.im] = vs[p].im;
                }
            }
        }
        x
    }

    /// Reactive limit of every IBDG evaluated at `x`.
    pub fn reactive_limits(&self, x: &[f64]) -> DeviceResult<Vec<f64>> {
        self.net
            .ibdgs()
            .iter()
            .map(|d| {
                let bi = self.net.bus_index(d.bus).unwrap();
                let v = self.map.bus_voltages(x, bi);
                let terms = CurrentLimitTerms::from_voltages(&v, d.control.k1, d.control.k2)
                    .map_err(|e| SolveError::SingularVoltage { bus: d.bus, magnitude: e.magnitude })?;
                Ok(q_headroom(&terms, self.lambda * d.p3g, d.i_rating))
            })
            .collect()
    }

    fn singular(bus: u32) -> impl Fn(crate::SingularVoltage) -> SolveError {
        move |e| SolveError::SingularVoltage { bus, magnitude: e.magnitude }
    }

    /// Stamps of one element group; element `k` of the returned list is
    /// independent of the others, so groups may be built in parallel.
    fn element_stamps(&self, x: &[f64], element: Element) -> DeviceResult<Vec<StampEntry>> {
        let net = self.net;
        let map = self.map;
        let mut out = Vec::new();
        match element {
            Element::Slack(bi) => {
                let vs = net.slack_voltage();
                for p in Phase::ALL {
                    if let Some(n) = map.node(bi, p) {
                        out.push(StampEntry::matrix(n.re, n.re, 1.0));
                        out.push(StampEntry::matrix(n.im, n.im, 1.0));
                        out.push(StampEntry::rhs(n.re, vs[p].re));
                        out.push(StampEntry::rhs(n.im, vs[p].im));
                    }
                }
            }
            Element::Branch(k) => {
                let br = &net.branches()[k];
                let (f, t) = (net.bus_index(br.from_bus).unwrap(), net.bus_index(br.to_bus).unwrap());
                out = stamp_branch(br, f, t, map);
            }
            Element::Load(k) => {
                let load = &net.loads()[k];
                let bi = net.bus_index(load.bus).unwrap();
                for p in load.phases().iter() {
                    let Some(n) = map.node(bi, p) else { continue };
                    let s = load.power(p) * self.lambda;
                    let v = map.voltage(x, bi, p);
                    let lin = pv_linearize(s.re, s.im, v).map_err(Self::singular(load.bus))?;
                    lin.bind(n, v, None).stamps(n, 1.0, &mut out);
                }
            }
            Element::Generator(k) => {
                let g = &net.generators()[k];
                let bi = net.bus_index(g.bus).unwrap();
                for p in Phase::ALL {
                    let (Some(n), Some(qc)) = (map.node(bi, p), map.q_pv(k, p)) else { continue };
                    let v = map.voltage(x, bi, p);
                    let lin = pv_linearize(self.lambda * g.p_per_phase, x[qc], v).map_err(Self::singular(g.bus))?;
                    lin.bind(n, v, Some((qc, x[qc]))).stamps(n, -1.0, &mut out);
                    match pinned_q(g, self.modes[k][p.index()]) {
                        None => voltage_control_linearize(v, g.v_setpoint, n).stamps(qc, &mut out),
                        Some(q) => ScalarLinearization {
                            value: x[qc] - q,
                            gradient: vec![(qc, x[qc], 1.0)],
                        }
                        .stamps(qc, &mut out),
                    }
                }
            }
            Element::Ibdg(k) => {
                let d = &net.ibdgs()[k];
                let bi = net.bus_index(d.bus).unwrap();
                let qc = map.q3g(k);
                let v = map.bus_voltages(x, bi);
                let lin = ibdg_linearize(&d.control, self.lambda * d.p3g, x[qc], &v).map_err(Self::singular(d.bus))?;
                let nodes: [NodeIndex; 3] = Phase::ALL.map(|p| map.node(bi, p).expect("IBDG bus has three phases"));
                let cols: Vec<(usize, f64)> = nodes
                    .iter()
                    .flat_map(|n| [(n.re, x[n.re]), (n.im, x[n.im])])
                    .chain([(qc, x[qc])])
                    .collect();
                for p in Phase::ALL {
                    let row = &lin.phase[p.index()];
                    CurrentLinearization {
                        current: lin.currents[p],
                        partials: cols.iter().zip(row).map(|(&(c, x0), &dv)| (c, x0, dv)).collect(),
                    }
                    .stamps(nodes[p.index()], -1.0, &mut out);
                }
                let (r, grad) = self.voltvar_row(k, &v, x[qc]);
                let mut gradient = vec![(qc, x[qc], 1.0)];
                for (i, n) in nodes.iter().enumerate() {
                    gradient.push((n.re, x[n.re], grad[2 * i]));
                    gradient.push((n.im, x[n.im], grad[2 * i + 1]));
                }
                ScalarLinearization { value: r, gradient }.stamps(qc, &mut out);
            }
        }
        Ok(out)
    }

    /// Volt/VAR residual of IBDG `k` and its gradient with respect to the six
    /// rectangular phase voltages of the device bus.
    fn voltvar_row(&self, k: usize, v: &PhasorSet, q3g: f64) -> (f64, [f64; 6]) {
        let d = &self.net.ibdgs()[k];
        let vpos = phase_to_sequence(v).positive;
        let m = vpos.norm();
        let (r, d_m) = voltvar_residual(&d.voltvar, m, q3g, self.q_limits[k], self.lambda);
        let mut grad = [0.0; 6];
        if m > 0.0 {
            for p in Phase::ALL {
                // ∂V+/∂V_R = c/3 and ∂V+/∂V_I = j c/3 for the phase coefficient c.
                let c = p.positive_rotation().conj() / 3.0;
                let dm_re = (vpos.conj() * c).re / m;
                let dm_im = (vpos.conj() * c * Complex64::new(0.0, 1.0)).re / m;
                grad[2 * p.index()] = d_m * dm_re;
                grad[2 * p.index() + 1] = d_m * dm_im;
            }
        }
        (r, grad)
    }

    fn elements(&self) -> Vec<Element> {
        let net = self.net;
        let mut e = Vec::new();
        if let Some(s) = net.slack_index() {
            e.push(Element::Slack(s));
        }
        e.extend((0..net.branches().len()).map(Element::Branch));
        e.extend((0..net.loads().len()).map(Element::Load));
        e.extend((0..net.generators().len()).map(Element::Generator));
        e.extend((0..net.ibdgs().len()).map(Element::Ibdg));
        e
    }

    /// Companion system `A·x_new = b` linearized at `x`; `A` is the Jacobian.
    pub fn assemble(&self, x: &[f64]) -> DeviceResult<(SparseMatrix, Vec<f64>)> {
        let elements = self.elements();
        let groups: Vec<DeviceResult<Vec<StampEntry>>> = if self.parallel {
            elements.par_iter().map(|&e| self.element_stamps(x, e)).collect()
        } else {
            elements.iter().map(|&e| self.element_stamps(x, e)).collect()
        };
        let n = self.dim();
        let mut slack_row = vec![false; n];
        if let Some(s) = self.net.slack_index() {
            for p in Phase::ALL {
                if let Some(nd) = self.map.node(s, p) {
                    slack_row[nd.re] = true;
                    slack_row[nd.im] = true;
                }
            }
        }
        let mut a = SparseMatrix::new(n);
        let mut b = vec![0.0; n];
        for (e, g) in elements.iter().zip(groups) {
            let keep_slack = matches!(e, Element::Slack(_));
            for s in g? {
                if slack_row[s.row] && !keep_slack {
                    continue;
                }
                match s.target {
                    StampTarget::Unknown(c) => a.add(s.row, c, s.value),
                    StampTarget::Rhs => b[s.row] += s.value,
                }
            }
        }
        Ok((a, b))
    }

    /// Nonlinear residual `F(x)` in row order; KCL rows are currents leaving each node.
    pub fn residual(&self, x: &[f64]) -> DeviceResult<Vec<f64>> {
        let net = self.net;
        let map = self.map;
        let mut f = vec![0.0; self.dim()];
        let add = |n: NodeIndex, i: Complex64, f: &mut Vec<f64>| {
            f[n.re] += i.re;
            f[n.im] += i.im;
        };
        let slack = net.slack_index();
        if let Some(s) = slack {
            let vs = net.slack_voltage();
            for p in Phase::ALL {
                if let Some(n) = map.node(s, p) {
                    add(n, map.voltage(x, s, p) - vs[p], &mut f);
                }
            }
        }
        let is_kcl = |bi: usize| Some(bi) != slack;
        for br in net.branches() {
            let (fi, ti) = (net.bus_index(br.from_bus).unwrap(), net.bus_index(br.to_bus).unwrap());
            let (vf, vt) = (map.bus_voltages(x, fi), map.bus_voltages(x, ti));
            let half = br.shunt_admittance.scale(0.5);
            let own = br.series_admittance.add(&half);
            let i_from = own.mul_vec(&vf) - br.series_admittance.mul_vec(&vt);
            let i_to = own.mul_vec(&vt) - br.series_admittance.mul_vec(&vf);
            for p in Phase::ALL {
                if is_kcl(fi) {
                    if let Some(n) = map.node(fi, p) {
                        add(n, i_from[p], &mut f);
                    }
                }
                if is_kcl(ti) {
                    if let Some(n) = map.node(ti, p) {
                        add(n, i_to[p], &mut f);
                    }
                }
            }
        }
        for load in net.loads() {
            let bi = net.bus_index(load.bus).unwrap();
            if !is_kcl(bi) {
                continue;
            }
            for p in load.phases().iter() {
                let Some(n) = map.node(bi, p) else { continue };
                let s = load.power(p) * self.lambda;
                let i = crate::generator::pv_current_injection(s.re, s.im, map.voltage(x, bi, p)).map_err(Self::singular(load.bus))?;
                add(n, i, &mut f);
            }
        }
        for (k, g) in net.generators().iter().enumerate() {
            let bi = net.bus_index(g.bus).unwrap();
            for p in Phase::ALL {
                let (Some(n), Some(qc)) = (map.node(bi, p), map.q_pv(k, p)) else { continue };
                let v = map.voltage(x, bi, p);
                let i = crate::generator::pv_current_injection(self.lambda * g.p_per_phase, x[qc], v).map_err(Self::singular(g.bus))?;
                if is_kcl(bi) {
                    add(n, -i, &mut f);
                }
                f[qc] = match pinned_q(g, self.modes[k][p.index()]) {
                    None => crate::generator::voltage_control_residual(v, g.v_setpoint),
                    Some(q) => x[qc] - q,
                };
            }
        }
        for (k, d) in net.ibdgs().iter().enumerate() {
            let bi = net.bus_index(d.bus).unwrap();
            let qc = map.q3g(k);
            let v = map.bus_voltages(x, bi);
            let i = crate::ibdg::ibdg_injection(&d.control, self.lambda * d.p3g, x[qc], &v).map_err(Self::singular(d.bus))?;
            if is_kcl(bi) {
                for p in Phase::ALL {
                    if let Some(n) = map.node(bi, p) {
                        add(n, -i[p], &mut f);
                    }
                }
            }
            f[qc] = self.voltvar_row(k, &v, x[qc]).0;
        }
        Ok(f)
    }

    fn is_kcl_row(&self, row: usize) -> bool {
        matches!(self.map.unknown(row), Unknown::Voltage { bus, .. } if self.net.bus(bus).map(|b| b.kind) != Some(BusKind::Slack))
    }

    /// `(KCL max-norm, max-norm over every row)` of the nonlinear residual.
    pub fn residual_norms(&self, x: &[f64]) -> DeviceResult<(f64, f64)> {
        let f = self.residual(x)?;
        let mut kcl = 0.0f64;
        let mut all = 0.0f64;
        for (r, v) in f.iter().enumerate() {
            if self.is_kcl_row(r) {
                kcl = kcl.max(v.abs());
            }
            all = all.max(v.abs());
        }
        Ok((kcl, all))
    }
}

#[derive(Debug, Clone, Copy)]
enum Element {
    Slack(usize),
    Branch(usize),
    Load(usize),
    Generator(usize),
    Ibdg(usize),
}

/// Outcome of one Newton run at fixed λ and modes.
#[derive(Debug, Clone)]
struct Newton {
    x: Vec<f64>,
    q_limits: Vec<f64>,
    converged: bool,
    iterations: usize,
    kcl: f64,
}

fn newton(model: &mut SystemModel, x0: Vec<f64>, opts: &SolverOptions, trace: &mut Vec<TraceRow>, strict: bool) -> Result<Newton, SolveError> {
    let map = model.map;
    let mut x = x0;
    let fail = |x: Vec<f64>, q: Vec<f64>, it: usize| Newton {
        x,
        q_limits: q,
        converged: false,
        iterations: it,
        kcl: f64::INFINITY,
    };
    let q_rows: Vec<usize> = (0..map.len())
        .filter(|&i| !matches!(map.unknown(i), Unknown::Voltage { .. }))
        .collect();
    match model.reactive_limits(&x) {
        Ok(q) => model.q_limits = q,
        Err(e) if strict => return Err(e),
        Err(_) => return Ok(fail(x, model.q_limits.clone(), 0)),
    }
    for it in 0..opts.max_iter {
        let (a, b) = match model.assemble(&x) {
            Ok(s) => s,
            Err(e) if strict && it == 0 => return Err(e),
            Err(_) => return Ok(fail(x, model.q_limits.clone(), it)),
        };
        let lu = match a.factor() {
            Ok(lu) => lu,
            Err(z) if strict && it == 0 => {
                return Err(SolveError::SingularMatrix {
                    unknown: map.unknown(z.column),
                })
            }
            Err(_) => return Ok(fail(x, model.q_limits.clone(), it)),
        };
        let x_new = lu.solve(&b);
        let mut dx: Vec<f64> = x_new.iter().zip(&x).map(|(n, o)| n - o).collect();
        let dv = map
            .voltage_indices()
            .map(|n| dx[n.re].hypot(dx[n.im]))
            .fold(0.0, f64::max);
        let scale = if dv > opts.v_step_max { opts.v_step_max / dv } else { 1.0 };
        let relax = 1.0 - (1.0 - opts.q_relax) * 0.5f64.powi(it as i32);
        for d in dx.iter_mut() {
            *d *= scale;
        }
        for &i in &q_rows {
            dx[i] *= relax;
        }
        for (xi, d) in x.iter_mut().zip(&dx) {
            *xi += d;
        }
        let update = dx.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let diverged = x.iter().any(|v| !v.is_finite())
            || map.voltage_indices().any(|n| x[n.re].hypot(x[n.im]) > V_DIVERGED);
        if diverged {
            trace.push(TraceRow {
                iter: trace.len(),
                update_norm: update,
                kcl_norm: f64::INFINITY,
                lambda: model.lambda,
            });
            return Ok(fail(x, model.q_limits.clone(), it + 1));
        }
        let previous = std::mem::take(&mut model.q_limits);
        model.q_limits = match model.reactive_limits(&x) {
            Ok(q) => q,
            Err(_) => return Ok(fail(x, previous, it + 1)),
        };
        let dq = previous
            .iter()
            .zip(&model.q_limits)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let (kcl, all) = match model.residual_norms(&x) {
            Ok(r) => r,
            Err(_) => return Ok(fail(x, model.q_limits.clone(), it + 1)),
        };
        trace.push(TraceRow {
            iter: trace.len(),
            update_norm: update,
            kcl_norm: kcl,
            lambda: model.lambda,
        });
        if scale == 1.0 && update < opts.tol && all < opts.kcl_tol && dq < opts.qmax_tol {
            return Ok(Newton {
                x,
                q_limits: model.q_limits.clone(),
                converged: true,
                iterations: it + 1,
                kcl,
            });
        }
    }
    let kcl = model.residual_norms(&x).map(|r| r.0).unwrap_or(f64::INFINITY);
    Ok(Newton {
        kcl,
        converged: false,
        iterations: opts.max_iter,
        q_limits: model.q_limits.clone(),
        x,
    })
}

fn prepare(net: &Network, opts: &SolverOptions) -> Result<UnknownMap, SolveError> {
    opts.check()?;
    let report = validate(net);
    if !report.is_ok() {
        return Err(SolveError::Invalid(report));
    }
    Ok(UnknownMap::new(net))
}

fn finish(net: &Network, map: &UnknownMap, run: &Newton, trace: Vec<TraceRow>, path: Vec<f64>, lambda: f64, switch: &[SwitchState], iterations: usize) -> SolveResult {
    let x = &run.x;
    let voltages = (0..net.buses().len()).map(|b| map.bus_voltages(x, b)).collect();
    let q_pv = (0..net.generators().len())
        .map(|k| Phase::ALL.map(|p| map.q_pv(k, p).map_or(0.0, |c| x[c])))
        .collect();
    let pvpq_flagged: Vec<u32> = net
        .generators()
        .iter()
        .zip(switch)
        .filter(|(_, s)| s.flagged)
        .map(|(g, _)| g.id)
        .collect();
    SolveResult {
        bus_ids: net.buses().iter().map(|b| b.id).collect(),
        voltages,
        q_pv,
        q3g: (0..net.ibdgs().len()).map(|k| x[map.q3g(k)]).collect(),
        q_max: run.q_limits.clone(),
        iterations,
        final_residual: run.kcl,
        trace,
        converged: run.converged && pvpq_flagged.is_empty(),
        homotopy_path: path,
        lambda_reached: lambda,
        pvpq_flagged,
        pvpq_toggles: switch.iter().map(|s| s.toggles).collect(),
        state: x.clone(),
    }
}

/// Newton at λ = 1 from flat start (or `warm`), wrapped in the PV/PQ outer loop
/// when enabled.
fn solve_full(net: &Network, map: &UnknownMap, opts: &SolverOptions, warm: Option<Vec<f64>>) -> Result<SolveResult, SolveError> {
    let mut model = SystemModel::new(net, map, 1.0);
    model.parallel = opts.parallel_assembly;
    let mut x = warm.unwrap_or_else(|| model.flat_start());
    let mut trace = Vec::new();
    let mut switch = vec![SwitchState::default(); net.generators().len()];
    let mut iterations = 0;
    let mut first = true;
    loop {
        let run = newton(&mut model, x, opts, &mut trace, first)?;
        first = false;
        iterations += run.iterations;
        if !run.converged || !opts.pvpq_switching {
            let lambda = if run.converged { 1.0 } else { 0.0 };
            return Ok(finish(net, map, &run, trace, vec![1.0], lambda, &switch, iterations));
        }
        let mut changed = false;
        for (k, g) in net.generators().iter().enumerate() {
            if !g.has_limits() {
                continue;
            }
            let bi = net.bus_index(g.bus).unwrap();
            let phases = net.buses()[bi].phases;
            let q = Phase::ALL.map(|p| map.q_pv(k, p).map_or(0.0, |c| run.x[c]));
            let vmag = Phase::ALL.map(|p| map.voltage(&run.x, bi, p).norm());
            changed |= pvpq_switch_step(g, phases, &mut switch[k], q, vmag);
            model.modes[k] = switch[k].modes;
        }
        if !changed {
            return Ok(finish(net, map, &run, trace, vec![1.0], 1.0, &switch, iterations));
        }
        x = run.x;
    }
}

/// Direct Newton-Raphson solve from flat start.
pub fn nr_solve(net: &Network, opts: &SolverOptions) -> Result<SolveResult, SolveError> {
    let map = prepare(net, opts)?;
    solve_full(net, &map, opts, None)
}

/// Direct Newton-Raphson solve started from the unknown vector of an earlier result.
pub fn nr_solve_from(net: &Network, opts: &SolverOptions, start: &SolveResult) -> Result<SolveResult, SolveError> {
    let map = prepare(net, opts)?;
    if start.state.len() != map.len() {
        return Err(SolveError::BadOptions("warm start does not match the network".into()));
    }
    solve_full(net, &map, opts, Some(start.state.clone()))
}

/// Source-stepping continuation: loads, generator active powers, IBDG P3G and
/// Volt/VAR outputs are scaled by λ, walked from 0 to 1 with warm starts.
pub fn homotopy_solve(net: &Network, opts: &SolverOptions) -> Result<SolveResult, SolveError> {
    let map = prepare(net, opts)?;
    let mut step = 1.0 / opts.homotopy_steps as f64;
    let mut total_iters = 0;
    let mut trace = Vec::new();
    let switch = vec![SwitchState::default(); net.generators().len()];
    if opts.homotopy_steps == 1 {
        let direct = solve_full(net, &map, opts, None)?;
        // Stepping the sources does not cure switching oscillation.
        if direct.converged || !direct.pvpq_flagged.is_empty() {
            return Ok(direct);
        }
        total_iters += direct.iterations;
        trace = direct.trace;
        step = 0.5;
    }
    let mut model = SystemModel::new(net, &map, 0.0);
    model.parallel = opts.parallel_assembly;
    let x0 = model.flat_start();
    let strict = trace.is_empty();
    let mut last = newton(&mut model, x0, opts, &mut trace, strict)?;
    total_iters += last.iterations;
    let mut path = Vec::new();
    let mut lambda = 0.0;
    if !last.converged {
        return Ok(finish(net, &map, &last, trace, path, lambda, &switch, total_iters));
    }
    path.push(0.0);
    while lambda < 1.0 {
        let target = (lambda + step).min(1.0);
        model.lambda = target;
        let run = newton(&mut model, last.x.clone(), opts, &mut trace, false)?;
        total_iters += run.iterations;
        if run.converged {
            lambda = target;
            path.push(lambda);
            last = run;
            step *= 1.5;
        } else {
            step *= 0.5;
            if step < MIN_LAMBDA_STEP {
                let mut stalled = last.clone();
                stalled.converged = false;
                return Ok(finish(net, &map, &stalled, trace, path, lambda, &switch, total_iters));
            }
        }
    }
    let done = finish(net, &map, &last, trace, path, 1.0, &switch, total_iters);
    if !opts.pvpq_switching || net.generators().is_empty() {
        return Ok(done);
    }
    let mut polished = solve_full(net, &map, opts, Some(done.state.clone()))?;
    let mut trace = done.trace;
    for row in &polished.trace {
        trace.push(TraceRow { iter: trace.len(), ..*row });
    }
    polished.trace = trace;
    polished.iterations += done.iterations;
    polished.homotopy_path = done.homotopy_path;
    if !polished.converged {
        polished.lambda_reached = 1.0;
    }
    Ok(polished)
}

/// Dispatches on [`SolverOptions::homotopy`].
pub fn solve(net: &Network, opts: &SolverOptions) -> Result<SolveResult, SolveError> {
    if opts.homotopy {
        homotopy_solve(net, opts)
    } else {
        nr_solve(net, opts)
    }
}

/// Nodal current mismatch at every non-slack node with the nonlinear device
/// equations at full load. `voltages` is per bus in network order.
pub fn kcl_residual(net: &Network, voltages: &[PhasorSet], q_pv: &[[f64; 3]], q3g: &[f64]) -> Result<Vec<PhasorSet>, SolveError> {
    let map = UnknownMap::new(net);
    let mut x = vec![0.0; map.len()];
    for (b, v) in voltages.iter().enumerate() {
        for p in Phase::ALL {
            if let Some(n) = map.node(b, p) {
                x[n.re] = v[p].re;
                x[n.im] = v[p].im;
            }
        }
    }
    for (k, q) in q_pv.iter().enumerate() {
        for p in Phase::ALL {
            if let Some(c) = map.q_pv(k, p) {
                x[c] = q[p.index()];
            }
        }
    }
    for (k, q) in q3g.iter().enumerate() {
        x[map.q3g(k)] = *q;
    }
    let model = SystemModel::new(net, &map, 1.0);
    let f = model.residual(&x)?;
    let slack = net.slack_index();
    Ok((0..net.buses().len())
        .map(|b| {
            if Some(b) == slack {
                return PhasorSet::zero();
            }
            PhasorSet(Phase::ALL.map(|p| map.node(b, p).map_or(Complex64::new(0.0, 0.0), |n| Complex64::new(f[n.re], f[n.im]))))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Branch, Bus, ConstantPowerLoad, PhaseMatrix};
    use crate::sequence::PhaseSet;

    fn bus(id: u32, kind: BusKind) -> Bus {
        Bus {
            id,
            kind,
            nominal_voltage: 1.0,
            phases: PhaseSet::ABC,
        }
    }

    fn two_bus(p: f64) -> Network {
        let z = Complex64::new(0.01, 0.03);
        Network::new(
            vec![bus(1, BusKind::Slack), bus(2, BusKind::Load)],
            vec![Branch {
                from_bus: 1,
                to_bus: 2,
                series_admittance: PhaseMatrix::diagonal(z.inv()),
                shunt_admittance: PhaseMatrix::zero(),
            }],
            vec![ConstantPowerLoad {
                bus: 2,
                p_per_phase: [p; 3],
                q_per_phase: [0.3 * p; 3],
            }],
            PhasorSet::balanced(1.0, 0.0),
            vec![],
            vec![],
        )
    }

    #[test]
    fn slack_only_returns_setpoint() {
        let net = Network::new(vec![bus(1, BusKind::Slack)], vec![], vec![], PhasorSet::balanced(1.02, 0.1), vec![], vec![]);
        let r = nr_solve(&net, &SolverOptions::default()).unwrap();
        assert!(r.converged);
        assert!(r.voltages[0].max_abs_diff(&PhasorSet::balanced(1.02, 0.1)) < 1e-15);
    }

    #[test]
    fn zero_load_converges_in_one_iteration() {
        let r = nr_solve(&two_bus(0.0), &SolverOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
        assert!(r.voltages[1].max_abs_diff(&PhasorSet::balanced(1.0, 0.0)) < 1e-15);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let net = two_bus(0.5);
        let map = UnknownMap::new(&net);
        let model = SystemModel::new(&net, &map, 1.0);
        let mut x = model.flat_start();
        for (i, v) in x.iter_mut().enumerate() {
            *v += 0.01 * ((i * 7 % 5) as f64 - 2.0);
        }
        let (a, b) = model.assemble(&x).unwrap();
        let f = model.residual(&x).unwrap();
        let ax = a.mul_vec(&x);
        for i in 0..x.len() {
            assert!((ax[i] - b[i] - f[i]).abs() < 1e-12);
        }
        for j in 0..x.len() {
            let h = 1e-6;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let (fp, fm) = (model.residual(&xp).unwrap(), model.residual(&xm).unwrap());
            for i in 0..x.len() {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!((a.get(i, j) - fd).abs() <= 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn infeasible_load_reports_non_convergence() {
        let r = nr_solve(&two_bus(50.0), &SolverOptions::default()).unwrap();
        assert!(!r.converged);
        assert!(!r.trace.is_empty());
        let h = homotopy_solve(&two_bus(50.0), &SolverOptions::default()).unwrap();
        assert!(!h.converged);
        assert!(h.lambda_reached < 1.0);
    }

    #[test]
    fn singular_system_names_unknown() {
        // Bus 2 present on phase A only, connected through a zero admittance on A.
        let mut b2 = bus(2, BusKind::Load);
        b2.phases = PhaseSet::single(Phase::A);
        let mut y = PhaseMatrix::zero();
        y.0[1][1] = Complex64::new(1.0, -3.0);
        let net = Network::new(
            vec![bus(1, BusKind::Slack), b2, bus(3, BusKind::Load)],
            vec![
                Branch {
                    from_bus: 1,
                    to_bus: 3,
                    series_admittance: PhaseMatrix::diagonal(Complex64::new(1.0, -3.0)),
                    shunt_admittance: PhaseMatrix::zero(),
                },
                Branch {
                    from_bus: 3,
                    to_bus: 2,
                    series_admittance: y,
                    shunt_admittance: PhaseMatrix::zero(),
                },
            ],
            vec![],
            PhasorSet::balanced(1.0, 0.0),
            vec![],
            vec![],
        );
        // Validation catches the isolated phase before factorization.
        assert!(matches!(nr_solve(&net, &SolverOptions::default()), Err(SolveError::Invalid(_))));
    }
}
