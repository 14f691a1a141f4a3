//! TOML case files.
//!
//! Powers are per-unit unless given in kW/kvar; impedances are per-unit unless
//! given in ohms. Per-phase powers use the per-phase base `base_mva / 3` and
//! the impedance base is `base_kv² / base_mva` with `base_kv` line-to-line.
//!
//! ```toml
//! schema_version = 1
//! base_mva = 1.0
//! base_kv = 12.47
//!
//! [[bus]]
//! id = 1
//! kind = "slack"
//!
//! [[bus]]
//! id = 2
//! kind = "load"
//!
//! [[branch]]
//! from = 1
//! to = 2
//! z_series = { diag = [0.01, 0.03], off = [0.0, 0.0] }
//!
//! [[load]]
//! bus = 2
//! p = [0.1, 0.1, 0.1]
//! q = [0.03, 0.03, 0.03]
//! ```

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generator::PvGenerator;
use crate::ibdg::{FpnscControl, IbdgDevice};
use crate::network::{validate, Branch, Bus, BusKind, ConstantPowerLoad, Network, PhaseMatrix, ValidationReport};
use crate::sequence::{Phase, PhaseSet, PhasorSet};
use crate::solver::SolverOptions;
use crate::voltvar::{build_curve, VoltVarBreakpoints};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CaseError {
    #[error("{0}")]
    Syntax(String),
    #[error("{location}: {message}")]
    Invalid { location: String, message: String },
    #[error("network is not solvable:\n{0}")]
    Validation(ValidationReport),
}

fn invalid(location: impl Into<String>, message: impl Into<String>) -> CaseError {
    CaseError::Invalid {
        location: location.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFile {
    pub schema_version: u32,
    pub base_mva: f64,
    pub base_kv: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slack: Option<SlackSpec>,
    #[serde(default, rename = "bus", skip_serializing_if = "Vec::is_empty")]
    pub buses: Vec<BusSpec>,
    #[serde(default, rename = "branch", skip_serializing_if = "Vec::is_empty")]
    pub branches: Vec<BranchSpec>,
    #[serde(default, rename = "load", skip_serializing_if = "Vec::is_empty")]
    pub loads: Vec<LoadSpec>,
    #[serde(default, rename = "pv_generator", skip_serializing_if = "Vec::is_empty")]
    pub pv_generators: Vec<PvGeneratorSpec>,
    #[serde(default, rename = "ibdg", skip_serializing_if = "Vec::is_empty")]
    pub ibdgs: Vec<IbdgSpec>,
    #[serde(default, skip_serializing_if = "SolverSpec::is_empty")]
    pub solver: SolverSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlackSpec {
    pub magnitude: [f64; 3],
    pub angle_deg: [f64; 3],
}

impl Default for SlackSpec {
    fn default() -> Self {
        SlackSpec {
            magnitude: [1.0; 3],
            angle_deg: [0.0, -120.0, 120.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKindSpec {
    Slack,
    Load,
    Generator,
    Ibdg,
}

fn one() -> f64 {
    1.0
}

fn abc() -> String {
    "ABC".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusSpec {
    pub id: u32,
    pub kind: BusKindSpec,
    #[serde(default = "one")]
    pub nominal_voltage: f64,
    #[serde(default = "abc")]
    pub phases: String,
}

/// A 3×3 complex matrix, either in full (`[[[re, im]; 3]; 3]`) or as equal
/// self and mutual terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Full([[[f64; 2]; 3]; 3]),
    SelfMutual(SelfMutualSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfMutualSpec {
    pub diag: [f64; 2],
    pub off: [f64; 2],
}

impl MatrixSpec {
    fn to_matrix(&self) -> PhaseMatrix {
        let c = |x: [f64; 2]| Complex64::new(x[0], x[1]);
        match self {
            MatrixSpec::Full(m) => PhaseMatrix(m.map(|row| row.map(c))),
            MatrixSpec::SelfMutual(s) => PhaseMatrix::self_mutual(c(s.diag), c(s.off)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    pub from: u32,
    pub to: u32,
    /// Restricts the matrices to these phases; the others are zeroed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phases: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_series: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_series: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_series_ohm: Option<MatrixSpec>,
    /// Total shunt admittance, split equally between the two ends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_shunt: Option<MatrixSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSpec {
    pub bus: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_kw: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_kvar: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PvGeneratorSpec {
    pub id: u32,
    pub bus: u32,
    pub p_per_phase: f64,
    pub v_setpoint: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_max: Option<f64>,
}

fn unit_alpha() -> [f64; 2] {
    [1.0, 0.0]
}

fn zero_pair() -> [f64; 2] {
    [0.0, 0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IbdgSpec {
    pub id: u32,
    pub bus: u32,
    pub p3g: f64,
    #[serde(default = "one")]
    pub k1: f64,
    #[serde(default = "one")]
    pub k2: f64,
    #[serde(default = "unit_alpha")]
    pub alpha: [f64; 2],
    #[serde(default = "zero_pair")]
    pub beta: [f64; 2],
    pub i_rating: f64,
    #[serde(default)]
    pub voltvar: VoltVarSpec,
}

/// `"auto"` or an explicit breakpoint table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VoltVarSpec {
    Keyword(String),
    Table(VoltVarTable),
}

impl Default for VoltVarSpec {
    fn default() -> Self {
        VoltVarSpec::Keyword("auto".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoltVarTable {
    pub v: [f64; 4],
    pub q_cap: f64,
    pub q_abs: f64,
    #[serde(default = "default_halfwidth")]
    pub patch_halfwidth: f64,
}

fn default_halfwidth() -> f64 {
    VoltVarBreakpoints::default().patch_halfwidth
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_step_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homotopy_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_relax: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kcl_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homotopy: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pvpq_switching: Option<bool>,
}

impl SolverSpec {
    pub fn is_empty(&self) -> bool {
        self == &SolverSpec::default()
    }

    pub fn to_options(&self) -> SolverOptions {
        let d = SolverOptions::default();
        SolverOptions {
            tol: self.tol.unwrap_or(d.tol),
            max_iter: self.max_iter.unwrap_or(d.max_iter),
            v_step_max: self.v_step_max.unwrap_or(d.v_step_max),
            homotopy_steps: self.homotopy_steps.unwrap_or(d.homotopy_steps),
            q_relax: self.q_relax.unwrap_or(d.q_relax),
            kcl_tol: self.kcl_tol.unwrap_or(d.kcl_tol),
            homotopy: self.homotopy.unwrap_or(d.homotopy),
            pvpq_switching: self.pvpq_switching.unwrap_or(d.pvpq_switching),
            ..d
        }
    }
}

/// Strict parse: syntax errors carry line and column, unknown fields are rejected.
pub fn parse_case(text: &str) -> Result<CaseFile, CaseError> {
    let case: CaseFile = toml::from_str(text).map_err(|e| CaseError::Syntax(e.to_string()))?;
    if case.schema_version != SCHEMA_VERSION {
        return Err(invalid(
            "schema_version",
            format!("unsupported version {} (expected {SCHEMA_VERSION})", case.schema_version),
        ));
    }
    case.to_network()?;
    Ok(case)
}

pub fn serialize_case(case: &CaseFile) -> String {
    toml::to_string(case).expect("case files always serialize")
}

/// Parses, converts and validates.
pub fn load_case(text: &str) -> Result<(CaseFile, Network), CaseError> {
    let case = parse_case(text)?;
    let net = case.to_network()?;
    let report = validate(&net);
    if !report.is_ok() {
        return Err(CaseError::Validation(report));
    }
    Ok((case, net))
}

impl CaseFile {
    pub fn new(base_mva: f64, base_kv: f64) -> Self {
        CaseFile {
            schema_version: SCHEMA_VERSION,
            base_mva,
            base_kv,
            slack: None,
            buses: vec![],
            branches: vec![],
            loads: vec![],
            pv_generators: vec![],
            ibdgs: vec![],
            solver: SolverSpec::default(),
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        self.solver.to_options()
    }

    fn impedance_base(&self) -> f64 {
        self.base_kv * self.base_kv / self.base_mva
    }

    /// Per-phase power base in kVA.
    fn phase_kva(&self) -> f64 {
        1000.0 * self.base_mva / 3.0
    }

    /// Converts to the per-unit network model. Structural problems that the
    /// model cannot even represent are errors here; topology is left to
    /// [`validate`].
    pub fn to_network(&self) -> Result<Network, CaseError> {
        if !(self.base_mva > 0.0 && self.base_kv > 0.0) {
            return Err(invalid("base_mva/base_kv", "bases must be positive"));
        }
        let mut buses = Vec::new();
        for (i, b) in self.buses.iter().enumerate() {
            let loc = format!("bus[{i}] (id {})", b.id);
            let phases = PhaseSet::parse(&b.phases).ok_or_else(|| invalid(&loc, format!("bad phase list {:?}", b.phases)))?;
            buses.push(Bus {
                id: b.id,
                kind: match b.kind {
                    BusKindSpec::Slack => BusKind::Slack,
                    BusKindSpec::Load => BusKind::Load,
                    BusKindSpec::Generator => BusKind::Generator,
                    BusKindSpec::Ibdg => BusKind::IbdgAttachment,
                },
                nominal_voltage: b.nominal_voltage,
                phases,
            });
        }

        let mut branches = Vec::new();
        for (i, br) in self.branches.iter().enumerate() {
            let loc = format!("branch[{i}] ({} -> {})", br.from, br.to);
            let restrict = match &br.phases {
                Some(s) => Some(PhaseSet::parse(s).ok_or_else(|| invalid(&loc, format!("bad phase list {s:?}")))?),
                None => None,
            };
            let mask = |m: PhaseMatrix| match restrict {
                Some(set) => PhaseMatrix(std::array::from_fn(|r| {
                    std::array::from_fn(|c| {
                        let keep = set.contains(Phase::ALL[r]) && set.contains(Phase::ALL[c]);
                        if keep { m.0[r][c] } else { Complex64::new(0.0, 0.0) }
                    })
                })),
                None => m,
            };
            let given = [br.y_series.is_some(), br.z_series.is_some(), br.z_series_ohm.is_some()];
            if given.iter().filter(|&&g| g).count() != 1 {
                return Err(invalid(&loc, "exactly one of y_series, z_series, z_series_ohm is required"));
            }
            let series = if let Some(y) = &br.y_series {
                mask(y.to_matrix())
            } else {
                let (z, scale) = match (&br.z_series, &br.z_series_ohm) {
                    (Some(z), _) => (z, 1.0),
                    (None, Some(z)) => (z, 1.0 / self.impedance_base()),
                    _ => unreachable!(),
                };
                let z = mask(z.to_matrix().scale(scale));
                z.inverse_on(z.used_phases())
                    .ok_or_else(|| invalid(&loc, "series impedance matrix is singular"))?
            };
            let shunt = br.y_shunt.as_ref().map(|y| mask(y.to_matrix())).unwrap_or_default();
            branches.push(Branch {
                from_bus: br.from,
                to_bus: br.to,
                series_admittance: series,
                shunt_admittance: shunt,
            });
        }

        let mut loads = Vec::new();
        for (i, l) in self.loads.iter().enumerate() {
            let loc = format!("load[{i}] (bus {})", l.bus);
            let pick = |pu: Option<[f64; 3]>, phys: Option<[f64; 3]>, name: &str| -> Result<[f64; 3], CaseError> {
                match (pu, phys) {
                    (Some(_), Some(_)) => Err(invalid(&loc, format!("give {name} either in pu or in physical units, not both"))),
                    (Some(v), None) => Ok(v),
                    (None, Some(v)) => Ok(v.map(|x| x / self.phase_kva())),
                    (None, None) => Ok([0.0; 3]),
                }
            };
            loads.push(ConstantPowerLoad {
                bus: l.bus,
                p_per_phase: pick(l.p, l.p_kw, "p")?,
                q_per_phase: pick(l.q, l.q_kvar, "q")?,
            });
        }

        let generators = self
            .pv_generators
            .iter()
            .map(|g| PvGenerator {
                id: g.id,
                bus: g.bus,
                p_per_phase: g.p_per_phase,
                v_setpoint: g.v_setpoint,
                q_min: g.q_min,
                q_max: g.q_max,
            })
            .collect();

        let mut ibdgs = Vec::new();
        for (i, d) in self.ibdgs.iter().enumerate() {
            let loc = format!("ibdg[{i}] (id {})", d.id);
            let bp = match &d.voltvar {
                VoltVarSpec::Keyword(k) if k == "auto" => VoltVarBreakpoints::auto(d.i_rating),
                VoltVarSpec::Keyword(k) => return Err(invalid(&loc, format!("unknown voltvar keyword {k:?} (expected \"auto\" or a table)"))),
                VoltVarSpec::Table(t) => VoltVarBreakpoints {
                    v: t.v,
                    q_cap: t.q_cap,
                    q_abs: t.q_abs,
                    patch_halfwidth: t.patch_halfwidth,
                },
            };
            let voltvar = build_curve(&bp).map_err(|e| invalid(&loc, e.to_string()))?;
            ibdgs.push(IbdgDevice {
                id: d.id,
                bus: d.bus,
                p3g: d.p3g,
                control: FpnscControl {
                    k1: d.k1,
                    k2: d.k2,
                    alpha: Complex64::new(d.alpha[0], d.alpha[1]),
                    beta: Complex64::new(d.beta[0], d.beta[1]),
                },
                i_rating: d.i_rating,
                voltvar,
            });
        }

        let slack = self.slack.clone().unwrap_or_default();
        let slack_voltage = PhasorSet::from_polar_deg(slack.magnitude, slack.angle_deg);
        if let Some(s) = self.solver_options().check().err() {
            return Err(invalid("solver", s.to_string()));
        }
        Ok(Network::new(buses, branches, loads, slack_voltage, generators, ibdgs))
    }
}
