//! Fortescue symmetrical components.
//!
//! The forward transform uses the averaging (1/3) normalization, so a balanced
//! ABC-rotation set maps onto a positive-sequence phasor equal to its phase-A
//! value. Under this scaling the power identity reads
//! `|Va|^2 + |Vb|^2 + |Vc|^2 == 3 (|V0|^2 + |V+|^2 + |V-|^2)`.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Sub};

use num_complex::Complex64;

/// Negative-sequence magnitude below which a voltage set is treated as balanced.
pub const EPS_SEQ: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Phase> {
        Phase::ALL.get(i).copied()
    }

    /// Rotation that takes the positive-sequence phasor to this phase's component.
    pub fn positive_rotation(self) -> Complex64 {
        match self {
            Phase::A => Complex64::new(1.0, 0.0),
            Phase::B => a_operator() * a_operator(),
            Phase::C => a_operator(),
        }
    }

    /// Rotation that takes the negative-sequence phasor to this phase's component.
    pub fn negative_rotation(self) -> Complex64 {
        match self {
            Phase::A => Complex64::new(1.0, 0.0),
            Phase::B => a_operator(),
            Phase::C => a_operator() * a_operator(),
        }
    }

    pub fn letter(self) -> char {
        match self {
            Phase::A => 'A',
            Phase::B => 'B',
            Phase::C => 'C',
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Subset of {A, B, C}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub const ABC: PhaseSet = PhaseSet(0b111);
    pub const EMPTY: PhaseSet = PhaseSet(0);

    pub fn single(phase: Phase) -> Self {
        PhaseSet(1 << phase.index())
    }

    pub fn contains(self, phase: Phase) -> bool {
        self.0 & (1 << phase.index()) != 0
    }

    pub fn insert(&mut self, phase: Phase) {
        self.0 |= 1 << phase.index();
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: PhaseSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Phase> {
        Phase::ALL.into_iter().filter(move |p| self.contains(*p))
    }

    /// Parses strings such as `"ABC"`, `"A"` or `"bc"`.
    pub fn parse(s: &str) -> Option<PhaseSet> {
        let mut set = PhaseSet::EMPTY;
        for ch in s.chars() {
            let phase = match ch.to_ascii_uppercase() {
                'A' => Phase::A,
                'B' => Phase::B,
                'C' => Phase::C,
                _ => return None,
            };
            if set.contains(phase) {
                return None;
            }
            set.insert(phase);
        }
        (!set.is_empty()).then_some(set)
    }
}

impl fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in self.iter() {
            write!(f, "{}", p.letter())?;
        }
        Ok(())
    }
}

/// The Fortescue operator `a = 1∠120°`.
pub fn a_operator() -> Complex64 {
    Complex64::from_polar(1.0, 2.0 * PI / 3.0)
}

/// Per-phase complex values indexed by [`Phase`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhasorSet(pub [Complex64; 3]);

impl PhasorSet {
    pub fn new(a: Complex64, b: Complex64, c: Complex64) -> Self {
        PhasorSet([a, b, c])
    }

    pub fn zero() -> Self {
        PhasorSet::default()
    }

    /// Balanced ABC-rotation set with phase A at `magnitude∠angle`.
    pub fn balanced(magnitude: f64, angle: f64) -> Self {
        let a = Complex64::from_polar(magnitude, angle);
        PhasorSet([
            a,
            a * Phase::B.positive_rotation(),
            a * Phase::C.positive_rotation(),
        ])
    }

    pub fn from_polar_deg(mags: [f64; 3], angles_deg: [f64; 3]) -> Self {
        PhasorSet(std::array::from_fn(|i| {
            Complex64::from_polar(mags[i], angles_deg[i].to_radians())
        }))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn magnitudes(&self) -> [f64; 3] {
        self.0.map(|z| z.norm())
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        PhasorSet(self.0.map(f))
    }

    pub fn scale(&self, s: Complex64) -> Self {
        self.map(|z| z * s)
    }

    pub fn max_abs_diff(&self, other: &PhasorSet) -> f64 {
        (0..3)
            .map(|i| (self.0[i] - other.0[i]).norm())
            .fold(0.0, f64::max)
    }
}

impl Index<Phase> for PhasorSet {
    type Output = Complex64;
    fn index(&self, p: Phase) -> &Complex64 {
        &self.0[p.index()]
    }
}

impl IndexMut<Phase> for PhasorSet {
    fn index_mut(&mut self, p: Phase) -> &mut Complex64 {
        &mut self.0[p.index()]
    }
}

impl Add for PhasorSet {
    type Output = PhasorSet;
    fn add(self, rhs: PhasorSet) -> PhasorSet {
        PhasorSet(std::array::from_fn(|i| self.0[i] + rhs.0[i]))
    }
}

impl Sub for PhasorSet {
    type Output = PhasorSet;
    fn sub(self, rhs: PhasorSet) -> PhasorSet {
        PhasorSet(std::array::from_fn(|i| self.0[i] - rhs.0[i]))
    }
}

impl Mul<Complex64> for PhasorSet {
    type Output = PhasorSet;
    fn mul(self, rhs: Complex64) -> PhasorSet {
        self.scale(rhs)
    }
}

/// Zero, positive and negative sequence components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SequenceSet {
    pub zero: Complex64,
    pub positive: Complex64,
    pub negative: Complex64,
}

impl SequenceSet {
    pub fn new(zero: Complex64, positive: Complex64, negative: Complex64) -> Self {
        SequenceSet {
            zero,
            positive,
            negative,
        }
    }

    /// Positive-sequence component seen on `phase`.
    pub fn positive_on(&self, phase: Phase) -> Complex64 {
        self.positive * phase.positive_rotation()
    }

    /// Negative-sequence component seen on `phase`.
    pub fn negative_on(&self, phase: Phase) -> Complex64 {
        self.negative * phase.negative_rotation()
    }

    pub fn is_balanced(&self) -> bool {
        self.negative.norm() < EPS_SEQ
    }
}

pub fn phase_to_sequence(v: &PhasorSet) -> SequenceSet {
    let a = a_operator();
    let a2 = a * a;
    let [va, vb, vc] = v.0;
    SequenceSet {
        zero: (va + vb + vc) / 3.0,
        positive: (va + a * vb + a2 * vc) / 3.0,
        negative: (va + a2 * vb + a * vc) / 3.0,
    }
}

pub fn sequence_to_phase(s: &SequenceSet) -> PhasorSet {
    PhasorSet(Phase::ALL.map(|p| s.zero + s.positive_on(p) + s.negative_on(p)))
}

/// `-j·v`: the orthogonal (lagging quadrature) voltage used for reactive current.
pub fn orthogonal(v: Complex64) -> Complex64 {
    Complex64::new(v.im, -v.re)
}

/// Per-phase rotated angle difference between the negative- and
/// positive-sequence voltages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gamma {
    /// Angles in radians, indexed by phase, reduced to (-π/2, π/2].
    pub values: [f64; 3],
    /// Set when |V-| is below [`EPS_SEQ`]; all values are then zero.
    pub balanced: bool,
}

impl Gamma {
    pub fn get(&self, phase: Phase) -> f64 {
        self.values[phase.index()]
    }
}

/// Half the angle from the phase's positive-sequence component to its
/// negative-sequence component, `γ_φ = (∠V-_φ − ∠V+_φ) / 2`.
///
/// The half angle is the one for which the closed-form peak current agrees with
/// a sampled waveform. Only `2γ` (equivalently `γ` modulo π) carries
/// information, and the doubled angles of phases B and A differ by 240°.
pub fn angle_gamma(vpos: Complex64, vneg: Complex64, phase: Phase) -> (f64, bool) {
    if vneg.norm() < EPS_SEQ {
        return (0.0, true);
    }
    let rel = vneg * phase.negative_rotation() * (vpos * phase.positive_rotation()).conj();
    let mut g = 0.5 * rel.arg();
    if g <= -PI / 2.0 {
        g += PI;
    }
    (g, false)
}

pub fn gamma_set(vpos: Complex64, vneg: Complex64) -> Gamma {
    let mut values = [0.0; 3];
    let mut balanced = false;
    for p in Phase::ALL {
        let (g, b) = angle_gamma(vpos, vneg, p);
        values[p.index()] = g;
        balanced = b;
    }
    Gamma { values, balanced }
}
