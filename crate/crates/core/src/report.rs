//! Voltage-profile metrics and CSV output.

use std::fmt;
use std::io::{self, Write};

use thiserror::Error;

use crate::network::Network;
use crate::sequence::{phase_to_sequence, PhaseSet, PhasorSet};
use crate::solver::{SolveResult, TraceRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnbalanceDefinition {
    /// `100·|V-|/|V+|`.
    #[default]
    Sequence,
    /// Largest deviation of a phase magnitude from the mean, over the mean, in percent.
    Nema,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReportError {
    #[error("solve did not converge (final KCL residual {residual:e}); see the iteration trace")]
    NotConverged { residual: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BusPhaseRow {
    pub bus: u32,
    pub phase: char,
    pub v_mag: f64,
    pub v_ang_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoltageProfileReport {
    pub v_min: f64,
    pub v_max: f64,
    pub v_mean: f64,
    /// Mean absolute deviation from nominal over the phases of IBDG buses.
    pub v_diff: f64,
    /// Mean voltage unbalance in percent over three-phase buses.
    pub v_unb: f64,
    pub per_bus: Vec<BusPhaseRow>,
    pub iterations: usize,
    pub final_residual: f64,
}

pub fn unbalance_percent(v: &PhasorSet, def: UnbalanceDefinition) -> f64 {
    match def {
        UnbalanceDefinition::Sequence => {
            let s = phase_to_sequence(v);
            100.0 * s.negative.norm() / s.positive.norm()
        }
        UnbalanceDefinition::Nema => {
            let m = v.magnitudes();
            let mean = m.iter().sum::<f64>() / 3.0;
            100.0 * m.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max) / mean
        }
    }
}

pub fn report(result: &SolveResult, net: &Network, def: UnbalanceDefinition) -> Result<VoltageProfileReport, ReportError> {
    if !result.converged {
        return Err(ReportError::NotConverged {
            residual: result.final_residual,
        });
    }
    let mut per_bus = Vec::new();
    let mut unb = Vec::new();
    for (bus, v) in net.buses().iter().zip(&result.voltages) {
        for p in bus.phases.iter() {
            per_bus.push(BusPhaseRow {
                bus: bus.id,
                phase: p.letter(),
                v_mag: v[p].norm(),
                v_ang_deg: v[p].arg().to_degrees(),
            });
        }
        if bus.phases == PhaseSet::ABC {
            unb.push(unbalance_percent(v, def));
        }
    }
    let mags: Vec<f64> = per_bus.iter().map(|r| r.v_mag).collect();
    let v_min = mags.iter().copied().fold(f64::INFINITY, f64::min);
    let v_max = mags.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let v_mean = (mags.iter().sum::<f64>() / mags.len() as f64).clamp(v_min, v_max);

    let mut dev = Vec::new();
    for d in net.ibdgs() {
        let i = net.bus_index(d.bus).unwrap();
        let bus = &net.buses()[i];
        for p in bus.phases.iter() {
            dev.push((result.voltages[i][p].norm() - bus.nominal_voltage).abs());
        }
    }
    let mean = |x: &[f64]| if x.is_empty() { 0.0 } else { x.iter().sum::<f64>() / x.len() as f64 };
    Ok(VoltageProfileReport {
        v_min,
        v_max,
        v_mean,
        v_diff: mean(&dev),
        v_unb: mean(&unb),
        per_bus,
        iterations: result.iterations,
        final_residual: result.final_residual,
    })
}

impl VoltageProfileReport {
    pub fn metrics(&self) -> [(&'static str, f64); 7] {
        [
            ("v_min", self.v_min),
            ("v_max", self.v_max),
            ("v_mean", self.v_mean),
            ("v_diff", self.v_diff),
            ("v_unb", self.v_unb),
            ("iterations", self.iterations as f64),
            ("final_residual", self.final_residual),
        ]
    }

    pub fn write_csv(&self, mut out: impl Write) -> io::Result<()> {
        writeln!(out, "bus,phase,v_mag,v_ang_deg")?;
        for r in &self.per_bus {
            writeln!(out, "{},{},{:.11e},{:.11e}", r.bus, r.phase, r.v_mag, r.v_ang_deg)?;
        }
        writeln!(out)?;
        writeln!(out, "metric,value")?;
        for (k, v) in self.metrics() {
            writeln!(out, "{k},{v:.11e}")?;
        }
        Ok(())
    }
}

/// Human summary: voltages to two decimals, unbalance to one.
impl fmt::Display for VoltageProfileReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "v_min  {:.2} pu", self.v_min)?;
        writeln!(f, "v_max  {:.2} pu", self.v_max)?;
        writeln!(f, "v_mean {:.2} pu", self.v_mean)?;
        writeln!(f, "v_diff {:.2} pu", self.v_diff)?;
        write!(f, "v_unb  {:.1} %", self.v_unb)
    }
}

pub fn write_trace(trace: &[TraceRow], mut out: impl Write) -> io::Result<()> {
    writeln!(out, "iter,update_norm,kcl_norm,lambda")?;
    for t in trace {
        writeln!(out, "{},{:.11e},{:.11e},{:.11e}", t.iter, t.update_norm, t.kcl_norm, t.lambda)?;
    }
    Ok(())
}
