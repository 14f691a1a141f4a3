//! Stamps: additive matrix and right-hand-side contributions to the real-valued
//! nodal system `A·x = b`.
//!
//! Every nonlinear device is linearized at the current iterate `x_k`. A current
//! `I(x) ≈ I(x_k) + Σ d_j (x_j − x_k,j)` flowing out of a node contributes the
//! partials `d_j` to the matrix and the history source `−(I(x_k) − Σ d_j x_k,j)`
//! to the right-hand side, so solving the assembled system is one Newton step.

use num_complex::Complex64;

use crate::sequence::Phase;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StampTarget {
    Unknown(usize),
    Rhs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampEntry {
    pub row: usize,
    pub target: StampTarget,
    pub value: f64,
}

impl StampEntry {
    pub fn matrix(row: usize, col: usize, value: f64) -> Self {
        StampEntry {
            row,
            target: StampTarget::Unknown(col),
            value,
        }
    }

    pub fn rhs(row: usize, value: f64) -> Self {
        StampEntry {
            row,
            target: StampTarget::Rhs,
            value,
        }
    }
}

/// Row/column indices of the real and imaginary voltage unknowns of one node
/// (a present phase of a bus). The KCL equations of the node use the same
/// indices as rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeIndex {
    pub re: usize,
    pub im: usize,
}

/// Resolves `(dense bus index, phase)` to the node's unknowns.
pub trait NodeLookup {
    fn node(&self, bus: usize, phase: Phase) -> Option<NodeIndex>;
}

/// A complex current linearized about an expansion point.
#[derive(Debug, Clone, PartialEq)]
pub struct CurrentLinearization {
    /// Current at the expansion point.
    pub current: Complex64,
    /// `(unknown index, value at the expansion point, ∂I/∂x)`.
    pub partials: Vec<(usize, f64, Complex64)>,
}

impl CurrentLinearization {
    /// Evaluates the first-order model at `x` (given as a lookup by unknown).
    pub fn eval_linear(&self, x: impl Fn(usize) -> f64) -> Complex64 {
        self.partials
            .iter()
            .fold(self.current, |acc, &(j, x0, d)| acc + d * (x(j) - x0))
    }

    /// Stamps `sign · I` as a current flowing out of `node`.
    pub fn stamps(&self, node: NodeIndex, sign: f64, out: &mut Vec<StampEntry>) {
        let mut history = self.current;
        for &(j, x0, d) in &self.partials {
            history -= d * x0;
            if d.re != 0.0 {
                out.push(StampEntry::matrix(node.re, j, sign * d.re));
            }
            if d.im != 0.0 {
                out.push(StampEntry::matrix(node.im, j, sign * d.im));
            }
        }
        out.push(StampEntry::rhs(node.re, -sign * history.re));
        out.push(StampEntry::rhs(node.im, -sign * history.im));
    }
}

/// A scalar equation `r(x) = 0` linearized about an expansion point.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarLinearization {
    pub value: f64,
    /// `(unknown index, value at the expansion point, ∂r/∂x)`.
    pub gradient: Vec<(usize, f64, f64)>,
}

impl ScalarLinearization {
    pub fn stamps(&self, row: usize, out: &mut Vec<StampEntry>) {
        let mut history = self.value;
        for &(j, x0, g) in &self.gradient {
            history -= g * x0;
            if g != 0.0 {
                out.push(StampEntry::matrix(row, j, g));
            }
        }
        out.push(StampEntry::rhs(row, -history));
    }
}
