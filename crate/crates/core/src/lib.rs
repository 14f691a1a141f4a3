//! Three-phase unbalanced distribution power flow built on an equivalent-circuit
//! Newton-Raphson formulation, with an analytical model of inverter-based
//! distributed generators (IBDGs).
//!
//! The IBDG model covers flexible positive/negative-sequence current control,
//! instantaneous phase-current limits, the reactive-power capability that
//! follows from them, and a first-order continuous Volt/VAR characteristic that
//! is solved implicitly alongside the network equations.
//!
//! Module map:
//! - [`network`]: buses, branches, loads and topology validation.
//! - [`sequence`]: symmetrical-component transforms.
//! - [`generator`]: PV-bus generator equations and the PV/PQ switching baseline.
//! - [`ibdg`]: the inverter current law, its linearization and current limits.
//! - [`voltvar`]: the smooth Volt/VAR curve.
//! - [`solver`]: assembly, sparse LU, Newton-Raphson and source stepping.
//! - [`waveform`]: brute-force time-domain checks of the current-limit algebra.
//! - [`case`], [`report`], [`feeder`], [`cli`]: case files, reporting,
//!   synthetic feeders and the command-line front end.

pub mod case;
pub mod cli;
pub mod feeder;
pub mod generator;
pub mod ibdg;
pub mod network;
pub mod report;
pub mod sequence;
pub mod solver;
pub mod stamp;
pub mod voltvar;
pub mod waveform;

pub use num_complex::Complex64;

/// Rectangular complex quantity in per-unit.
pub type ComplexRect = Complex64;

/// Error raised when a device equation is evaluated at (numerically) zero voltage.
#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("device voltage magnitude {magnitude:e} is too small to evaluate the current law")]
pub struct SingularVoltage {
    pub magnitude: f64,
}
