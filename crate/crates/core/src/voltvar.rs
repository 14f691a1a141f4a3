//! First-order continuous Volt/VAR characteristic.
//!
//! The curve is the usual polyline (flat injection, falling ramp, deadband,
//! falling ramp, flat absorption) with every corner replaced by a cubic patch
//! that matches value and slope of both neighbouring lines. Outside the outer
//! patches the curve is exactly flat.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoltVarBreakpoints {
    /// `v1 < v2 <= v3 < v4`; `[v2, v3]` is the deadband.
    pub v: [f64; 4],
    /// Injection below `v1` (>= 0).
    pub q_cap: f64,
    /// Absorption above `v4` (<= 0).
    pub q_abs: f64,
    pub patch_halfwidth: f64,
}

impl Default for VoltVarBreakpoints {
    fn default() -> Self {
        VoltVarBreakpoints {
            v: [0.92, 0.98, 1.02, 1.08],
            q_cap: 0.44,
            q_abs: -0.44,
            patch_halfwidth: 0.005,
        }
    }
}

impl VoltVarBreakpoints {
    /// Default curve sized from the apparent-power rating of a device
    /// (44 % of rating in either direction).
    pub fn auto(rating: f64) -> Self {
        VoltVarBreakpoints {
            q_cap: 0.44 * rating,
            q_abs: -0.44 * rating,
            ..Default::default()
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        VoltVarBreakpoints {
            q_cap: self.q_cap * factor,
            q_abs: self.q_abs * factor,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VoltVarError {
    #[error("breakpoints must satisfy v1 < v2 <= v3 < v4, got {0:?}")]
    Unordered([f64; 4]),
    #[error("q_abs must be <= 0 <= q_cap (q_cap = {q_cap}, q_abs = {q_abs})")]
    BadLevels { q_cap: f64, q_abs: f64 },
    #[error("patch half-width must be positive and finite, got {0}")]
    BadHalfwidth(f64),
    #[error("patches around knots at {left} and {right} overlap (half-width {halfwidth})")]
    Overlap { left: f64, right: f64, halfwidth: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PieceKind {
    Linear,
    Cubic,
}

/// One piece of the curve on `[lo, hi)`, a polynomial in `t = v - anchor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Piece {
    pub lo: f64,
    pub hi: f64,
    pub kind: PieceKind,
    pub anchor: f64,
    pub coeffs: [f64; 4],
}

impl Piece {
    pub fn eval(&self, v: f64) -> f64 {
        let t = v - self.anchor;
        let [c0, c1, c2, c3] = self.coeffs;
        c0 + t * (c1 + t * (c2 + t * c3))
    }

    pub fn derivative(&self, v: f64) -> f64 {
        let t = v - self.anchor;
        let [_, c1, c2, c3] = self.coeffs;
        c1 + t * (2.0 * c2 + t * 3.0 * c3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoltVarCurve {
    breakpoints: VoltVarBreakpoints,
    pieces: Vec<Piece>,
}

impl fmt::Display for VoltVarCurve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = &self.breakpoints;
        write!(
            f,
            "volt/var v=({}, {}, {}, {}) q=({}, {}) patch={}",
            b.v[0], b.v[1], b.v[2], b.v[3], b.q_cap, b.q_abs, b.patch_halfwidth
        )
    }
}

/// Builds the curve, checking the breakpoint invariants.
pub fn build_curve(bp: &VoltVarBreakpoints) -> Result<VoltVarCurve, VoltVarError> {
    let [v1, v2, v3, v4] = bp.v;
    if !(bp.v.iter().all(|x| x.is_finite()) && v1 < v2 && v2 <= v3 && v3 < v4) {
        return Err(VoltVarError::Unordered(bp.v));
    }
    if !(bp.q_cap.is_finite() && bp.q_abs.is_finite() && bp.q_abs <= 0.0 && bp.q_cap >= 0.0) {
        return Err(VoltVarError::BadLevels {
            q_cap: bp.q_cap,
            q_abs: bp.q_abs,
        });
    }
    let h = bp.patch_halfwidth;
    if !(h.is_finite() && h > 0.0) {
        return Err(VoltVarError::BadHalfwidth(h));
    }

    // Polyline vertices; a zero-width deadband collapses two knots into one.
    let mut vertices = vec![(v1, bp.q_cap), (v2, 0.0)];
    if v3 > v2 {
        vertices.push((v3, 0.0));
    }
    vertices.push((v4, bp.q_abs));

    for w in vertices.windows(2) {
        if w[1].0 - w[0].0 <= 2.0 * h {
            return Err(VoltVarError::Overlap {
                left: w[0].0,
                right: w[1].0,
                halfwidth: h,
            });
        }
    }

    // Slopes of the segments: flat, ..., flat.
    let mut slopes = vec![0.0];
    for w in vertices.windows(2) {
        slopes.push((w[1].1 - w[0].1) / (w[1].0 - w[0].0));
    }
    slopes.push(0.0);

    let line_at = |k: usize, v: f64| -> f64 {
        // Segment k runs from vertex k-1 to vertex k (k = 0 is the left flat).
        let (vx, qx) = if k == 0 { vertices[0] } else { vertices[k - 1] };
        qx + slopes[k] * (v - vx)
    };

    let mut pieces = Vec::new();
    let mut cursor = f64::NEG_INFINITY;
    for (k, &(vk, _)) in vertices.iter().enumerate() {
        let (a, b) = (vk - h, vk + h);
        // Straight segment k up to the patch.
        let anchor = if k == 0 { vk } else { vertices[k - 1].0 };
        let q_anchor = if k == 0 { vertices[0].1 } else { vertices[k - 1].1 };
        pieces.push(Piece {
            lo: cursor,
            hi: a,
            kind: PieceKind::Linear,
            anchor,
            coeffs: [q_anchor, slopes[k], 0.0, 0.0],
        });
        let (p0, p1) = (line_at(k, a), line_at(k + 1, b));
        pieces.push(hermite(a, b, p0, p1, slopes[k], slopes[k + 1]));
        cursor = b;
    }
    let &(vl, ql) = vertices.last().unwrap();
    pieces.push(Piece {
        lo: cursor,
        hi: f64::INFINITY,
        kind: PieceKind::Linear,
        anchor: vl,
        coeffs: [ql, 0.0, 0.0, 0.0],
    });

    Ok(VoltVarCurve {
        breakpoints: *bp,
        pieces,
    })
}

/// Cubic on `[a, b]` with the given end values and slopes.
fn hermite(a: f64, b: f64, p0: f64, p1: f64, m0: f64, m1: f64) -> Piece {
    let w = b - a;
    let secant = (p1 - p0) / w;
    Piece {
        lo: a,
        hi: b,
        kind: PieceKind::Cubic,
        anchor: a,
        coeffs: [
            p0,
            m0,
            (3.0 * secant - 2.0 * m0 - m1) / w,
            (m0 + m1 - 2.0 * secant) / (w * w),
        ],
    }
}

impl VoltVarCurve {
    pub fn breakpoints(&self) -> &VoltVarBreakpoints {
        &self.breakpoints
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    /// Piece boundaries in increasing order (excluding ±∞).
    pub fn knots(&self) -> Vec<f64> {
        self.pieces[1..].iter().map(|p| p.lo).collect()
    }

    fn piece_at(&self, v: f64) -> &Piece {
        let i = self.pieces.partition_point(|p| p.hi <= v);
        &self.pieces[i.min(self.pieces.len() - 1)]
    }

    pub fn eval(&self, v: f64) -> f64 {
        self.piece_at(v).eval(v)
    }

    pub fn eval_derivative(&self, v: f64) -> f64 {
        self.piece_at(v).derivative(v)
    }
}

/// `q3g − limit(scale · curve(|V_ctrl|), q_max)` and its partial derivatives
/// with respect to the control voltage magnitude and to `q3g`.
///
/// `scale` is the source-stepping factor applied to the curve output.
pub fn voltvar_residual(curve: &VoltVarCurve, v_ctrl: f64, q3g: f64, q_max: f64, scale: f64) -> (f64, f64) {
    let target = scale * curve.eval(v_ctrl);
    let (limited, slope) = crate::ibdg::apply_q_limit_with_slope(target, q_max);
    let d_v = -slope * scale * curve.eval_derivative(v_ctrl);
    (q3g - limited, d_v)
}
