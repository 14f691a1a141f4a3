//! Time-domain oracle for the current-limit algebra.
//!
//! Phasors are turned into one period of sampled sinusoids,
//! `i(t) = |I|·cos(ωt + ∠I)`, so a phasor's magnitude is its instantaneous
//! peak. Peaks and average powers are then measured by brute force.

use std::f64::consts::PI;
use std::io::{self, Write};

use thiserror::Error;

use crate::ibdg::{fpnsc_reference, peak_current, q_max, CurrentLimitTerms, IbdgDevice, QMax};
use crate::sequence::{phase_to_sequence, PhasorSet};

pub const MIN_SAMPLES: usize = 2048;
pub const DEFAULT_SAMPLES: usize = 4096;
pub const DEFAULT_FREQUENCY: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WaveformError {
    #[error("at least {MIN_SAMPLES} samples per period are required, got {0}")]
    TooFewSamples(usize),
    #[error("sample grids differ ({0} vs {1} samples or different time base)")]
    GridMismatch(usize, usize),
    #[error("quarter-period shift needs a sample count divisible by 4, got {0}")]
    NotQuarterAligned(usize),
    #[error(transparent)]
    Ibdg(#[from] crate::ibdg::IbdgError),
    #[error(transparent)]
    Singular(#[from] crate::SingularVoltage),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub time: Vec<f64>,
    pub samples: Vec<[f64; 3]>,
    pub frequency: f64,
}

impl Waveform {
    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn write_csv(&self, mut out: impl Write) -> io::Result<()> {
        writeln!(out, "time,ia,ib,ic")?;
        for (t, s) in self.time.iter().zip(&self.samples) {
            writeln!(out, "{:.11e},{:.11e},{:.11e},{:.11e}", t, s[0], s[1], s[2])?;
        }
        Ok(())
    }
}

pub fn synthesize(phasors: &PhasorSet, n_samples: usize) -> Result<Waveform, WaveformError> {
    synthesize_at(phasors, n_samples, DEFAULT_FREQUENCY)
}

pub fn synthesize_at(phasors: &PhasorSet, n_samples: usize, frequency: f64) -> Result<Waveform, WaveformError> {
    if n_samples < MIN_SAMPLES {
        return Err(WaveformError::TooFewSamples(n_samples));
    }
    let period = 1.0 / frequency;
    let time: Vec<f64> = (0..n_samples).map(|k| k as f64 * period / n_samples as f64).collect();
    let samples = (0..n_samples)
        .map(|k| {
            let wt = 2.0 * PI * k as f64 / n_samples as f64;
            phasors.0.map(|z| z.norm() * (wt + z.arg()).cos())
        })
        .collect();
    Ok(Waveform { time, samples, frequency })
}

/// Per-phase peak of |i(t)| with three-point parabolic refinement around the
/// largest sample (the record is periodic, so neighbours wrap around).
pub fn measure_peaks(w: &Waveform) -> [f64; 3] {
    let n = w.len();
    std::array::from_fn(|ph| {
        let (k, _) = w
            .samples
            .iter()
            .enumerate()
            .map(|(k, s)| (k, s[ph].abs()))
            .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        let y0 = w.samples[k][ph].abs();
        let ym = w.samples[(k + n - 1) % n][ph].abs();
        let yp = w.samples[(k + 1) % n][ph].abs();
        let denom = ym - 2.0 * y0 + yp;
        if denom >= 0.0 {
            return y0;
        }
        let delta = 0.5 * (ym - yp) / denom;
        y0 - 0.25 * (ym - yp) * delta
    })
}

/// Average active and reactive power summed over phases.
///
/// `P = 2·mean(Σ v·i)`, `Q = 2·mean(Σ v(t − T/4)·i(t))`; with the amplitude
/// convention these equal `Σ Re(V·I*)` and `Σ Im(V·I*)`.
pub fn measure_power(current: &Waveform, voltage: &Waveform) -> Result<(f64, f64), WaveformError> {
    let n = current.len();
    if n != voltage.len() || current.frequency != voltage.frequency || current.time != voltage.time {
        return Err(WaveformError::GridMismatch(n, voltage.len()));
    }
    if !n.is_multiple_of(4) {
        return Err(WaveformError::NotQuarterAligned(n));
    }
    let shift = n / 4;
    let mut p = 0.0;
    let mut q = 0.0;
    for k in 0..n {
        let lagged = &voltage.samples[(k + n - shift) % n];
        for ph in 0..3 {
            p += voltage.samples[k][ph] * current.samples[k][ph];
            q += lagged[ph] * current.samples[k][ph];
        }
    }
    Ok((2.0 * p / n as f64, 2.0 * q / n as f64))
}

/// Closed-form against sampled results for one device at one bus voltage.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub formula_peaks: [f64; 3],
    pub measured_peaks: [f64; 3],
    pub max_rel_error: f64,
    pub q_max: QMax,
    /// Largest sampled peak at `Q = q_max` (with `P = 0`).
    pub peak_at_q_max: f64,
    /// Largest sampled peak at `Q = 1.05 q_max` (with `P = 0`).
    pub peak_above_q_max: f64,
    /// Measured three-phase active power of the reference current at the operating point.
    pub measured_p3g: f64,
    pub waveform: Waveform,
}

/// Runs the waveform checks on the reference current of `device` at bus
/// voltage `v` and reactive power `q3g`.
pub fn oracle_check(device: &IbdgDevice, v: &PhasorSet, q3g: f64, n_samples: usize) -> Result<OracleReport, WaveformError> {
    let s = phase_to_sequence(v);
    let (k1, k2) = (device.control.k1, device.control.k2);
    let iref = fpnsc_reference(s.positive, s.negative, device.p3g, q3g, k1, k2)?;
    let terms = CurrentLimitTerms::new(s.positive, s.negative, k1, k2)?;
    let formula_peaks = peak_current(&terms, device.p3g, q3g);
    let waveform = synthesize(&iref, n_samples)?;
    let measured_peaks = measure_peaks(&waveform);
    let max_rel_error = (0..3)
        .map(|i| rel_error(formula_peaks[i], measured_peaks[i]))
        .fold(0.0, f64::max);
    let qm = q_max(device.i_rating, terms.vpos_mag, terms.vneg_mag, k2, &terms.gamma)?;
    let peak_of = |q: f64| -> Result<f64, WaveformError> {
        let i = fpnsc_reference(s.positive, s.negative, 0.0, q, k1, k2)?;
        Ok(measure_peaks(&synthesize(&i, n_samples)?).into_iter().fold(0.0, f64::max))
    };
    let vw = synthesize(v, n_samples)?;
    let (p, _) = measure_power(&waveform, &vw)?;
    Ok(OracleReport {
        formula_peaks,
        measured_peaks,
        max_rel_error,
        peak_at_q_max: peak_of(qm.value)?,
        peak_above_q_max: peak_of(1.05 * qm.value)?,
        q_max: qm,
        // Per-phase base to three-phase base.
        measured_p3g: p / 3.0,
        waveform,
    })
}

fn rel_error(reference: f64, value: f64) -> f64 {
    if reference == 0.0 {
        value.abs()
    } else {
        ((value - reference) / reference).abs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn polar_deg(m: f64, d: f64) -> Complex64 {
        Complex64::from_polar(m, d.to_radians())
    }

    #[test]
    fn unit_cosine_peak() {
        let w = synthesize(&PhasorSet::new(Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)), 4096).unwrap();
        let raw = w.samples.iter().map(|s| s[0].abs()).fold(0.0, f64::max);
        assert!((raw - 1.0).abs() < 1e-3);
        assert!((measure_peaks(&w)[0] - 1.0).abs() < 5e-4);
    }

    #[test]
    fn rejects_short_records() {
        assert!(matches!(synthesize(&PhasorSet::zero(), 100), Err(WaveformError::TooFewSamples(100))));
    }

    #[test]
    fn zero_phasors_give_zero_samples() {
        let w = synthesize(&PhasorSet::zero(), 2048).unwrap();
        assert!(w.samples.iter().all(|s| s == &[0.0; 3]));
    }

    #[test]
    fn balanced_set_sums_to_zero() {
        let w = synthesize(&PhasorSet::balanced(1.0, 0.3), 4096).unwrap();
        for s in &w.samples {
            assert!((s[0] + s[1] + s[2]).abs() < 1e-10);
        }
    }

    #[test]
    fn peaks_are_time_shift_invariant() {
        let i = PhasorSet::new(polar_deg(0.7, 13.0), polar_deg(1.1, -100.0), polar_deg(0.9, 140.0));
        let a = measure_peaks(&synthesize(&i, 4096).unwrap());
        let b = measure_peaks(&synthesize(&i.scale(polar_deg(1.0, 37.3)), 4096).unwrap());
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-6 * a[k]);
        }
    }

    #[test]
    fn doubling_samples_barely_moves_peaks() {
        let i = PhasorSet::new(polar_deg(0.7, 13.1), polar_deg(1.1, -100.7), polar_deg(0.9, 140.2));
        let a = measure_peaks(&synthesize(&i, 4096).unwrap());
        let b = measure_peaks(&synthesize(&i, 8192).unwrap());
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-4 * a[k]);
        }
    }

    #[test]
    fn power_of_balanced_sets() {
        let v = synthesize(&PhasorSet::balanced(1.0, 0.0), 4096).unwrap();
        let i_in_phase = synthesize(&PhasorSet::balanced(0.5, 0.0), 4096).unwrap();
        let (p, q) = measure_power(&i_in_phase, &v).unwrap();
        assert!((p - 1.5).abs() < 1.5e-3 && q.abs() < 1e-3);
        let i_lag = synthesize(&PhasorSet::balanced(0.5, -PI / 2.0), 4096).unwrap();
        let (p, q) = measure_power(&i_lag, &v).unwrap();
        assert!(p.abs() < 1e-3 && (q - 1.5).abs() < 1.5e-3);
        let short = synthesize(&PhasorSet::balanced(1.0, 0.0), 2048).unwrap();
        assert!(measure_power(&short, &v).is_err());
    }

    #[test]
    fn fpnsc_positive_weights_deliver_commanded_power() {
        let vp = polar_deg(1.0, 5.0);
        let vn = polar_deg(0.15, 70.0);
        let v = crate::sequence::sequence_to_phase(&crate::sequence::SequenceSet::new(Complex64::new(0.0, 0.0), vp, vn));
        let i = fpnsc_reference(vp, vn, 0.8, 0.3, 1.0, 1.0).unwrap();
        let (p, _) = measure_power(&synthesize(&i, 4096).unwrap(), &synthesize(&v, 4096).unwrap()).unwrap();
        assert!((p / 3.0 - 0.8).abs() < 0.005 * 0.8);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let w = synthesize(&PhasorSet::balanced(1.0, 0.0), 2048).unwrap();
        let mut buf = Vec::new();
        w.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("time,ia,ib,ic\n"));
        assert_eq!(text.lines().count(), 2049);
    }
}
