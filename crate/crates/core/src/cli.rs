//! Command-line front end.
//!
//! Exit codes: 0 success, 1 non-convergence (or a failed oracle check),
//! 2 input error.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::case::{load_case, serialize_case, CaseFile};
use crate::feeder::{synthetic_feeder, FeederSpec, Placement};
use crate::network::Network;
use crate::report::{report, write_trace, UnbalanceDefinition};
use crate::solver::{solve, SolveResult, SolverOptions};
use crate::waveform::{oracle_check, DEFAULT_SAMPLES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NOT_CONVERGED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ibdgflow", version, about = "Three-phase unbalanced power flow with analytical IBDG models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct SolveArgs {
    /// Use source-stepping homotopy if the direct solve fails.
    #[arg(long)]
    homotopy: bool,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Enable the PV/PQ switching baseline for limited generators.
    #[arg(long)]
    pvpq: bool,
    /// Assemble stamps in parallel.
    #[arg(long)]
    parallel: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve a case and print the voltage-profile summary.
    Solve {
        case: PathBuf,
        #[command(flatten)]
        opts: SolveArgs,
        /// Report CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Iteration trace CSV path.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Use the NEMA unbalance definition instead of |V-|/|V+|.
        #[arg(long)]
        nema: bool,
    },
    /// Parse and validate a case.
    Validate { case: PathBuf },
    /// Scale every IBDG's P3G over a range and report each step.
    Sweep {
        case: PathBuf,
        /// start:stop:step (step may be written 1/N).
        #[arg(long, default_value = "0:1:0.1")]
        penetration: String,
        #[command(flatten)]
        opts: SolveArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        nema: bool,
    },
    /// Compare one IBDG's closed-form current limits with sampled waveforms at the solved state.
    Oracle {
        case: PathBuf,
        #[arg(long)]
        ibdg: u32,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
        /// Waveform CSV path for the reference current.
        #[arg(long)]
        waveform: Option<PathBuf>,
        #[command(flatten)]
        opts: SolveArgs,
    },
    /// Write a synthetic 50-bus feeder case.
    Synth {
        #[arg(long, default_value = "distributed")]
        placement: Placement,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        penetration: f64,
        #[arg(long, default_value_t = 1.0)]
        k1: f64,
        #[arg(long, default_value_t = 1.0)]
        k2: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            EXIT_INPUT
        }
    }
}

fn read_case(path: &Path) -> Result<(CaseFile, Network), String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    load_case(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn options(case: &CaseFile, a: &SolveArgs) -> SolverOptions {
    let mut o = case.solver_options();
    if let Some(t) = a.tol {
        o.tol = t;
    }
    if let Some(m) = a.max_iter {
        o.max_iter = m;
    }
    o.homotopy |= a.homotopy;
    o.pvpq_switching |= a.pvpq;
    o.parallel_assembly |= a.parallel;
    o
}

fn create(path: &Path) -> Result<BufWriter<File>, String> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| format!("{}: {e}", path.display()))
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> String + '_ {
    move |e| format!("{}: {e}", path.display())
}

fn unbalance(nema: bool) -> UnbalanceDefinition {
    if nema {
        UnbalanceDefinition::Nema
    } else {
        UnbalanceDefinition::Sequence
    }
}

fn run_solve(net: &Network, opts: &SolverOptions) -> Result<SolveResult, String> {
    solve(net, opts).map_err(|e| e.to_string())
}

fn run(cmd: Command) -> Result<i32, String> {
    match cmd {
        Command::Validate { case } => {
            let (c, net) = read_case(&case)?;
            println!(
                "{}: ok ({} buses, {} branches, {} loads, {} generators, {} ibdgs, base {} MVA / {} kV)",
                case.display(),
                net.buses().len(),
                net.branches().len(),
                net.loads().len(),
                net.generators().len(),
                net.ibdgs().len(),
                c.base_mva,
                c.base_kv
            );
            Ok(EXIT_OK)
        }
        Command::Solve {
            case,
            opts,
            out,
            trace,
            nema,
        } => {
            let (c, net) = read_case(&case)?;
            let o = options(&c, &opts);
            let result = run_solve(&net, &o)?;
            if let Some(p) = &trace {
                let mut w = create(p)?;
                write_trace(&result.trace, &mut w).and_then(|_| w.flush()).map_err(io_err(p))?;
            }
            match report(&result, &net, unbalance(nema)) {
                Ok(rep) => {
                    println!("converged in {} iterations (lambda path {:?})", result.iterations, result.homotopy_path);
                    println!("{rep}");
                    if let Some(p) = &out {
                        let mut w = create(p)?;
                        rep.write_csv(&mut w).and_then(|_| w.flush()).map_err(io_err(p))?;
                    }
                    Ok(EXIT_OK)
                }
                Err(e) => {
                    eprintln!("{e}");
                    if !result.pvpq_flagged.is_empty() {
                        eprintln!("PV/PQ switching oscillated at generators {:?}", result.pvpq_flagged);
                    }
                    if result.lambda_reached < 1.0 && o.homotopy {
                        eprintln!("homotopy stalled at lambda = {}", result.lambda_reached);
                    }
                    Ok(EXIT_NOT_CONVERGED)
                }
            }
        }
        Command::Sweep {
            case,
            penetration,
            opts,
            out,
            nema,
        } => {
            let (c, net) = read_case(&case)?;
            let o = options(&c, &opts);
            let factors = parse_range(&penetration)?;
            let rows: Vec<Result<String, String>> = factors
                .par_iter()
                .map(|&f| {
                    let scaled = net.with_ibdg_power_scale(f);
                    let t0 = Instant::now();
                    let r = run_solve(&scaled, &o)?;
                    let secs = t0.elapsed().as_secs_f64();
                    Ok(match report(&r, &scaled, unbalance(nema)) {
                        Ok(rep) => format!(
                            "{f:.11e},true,{},{:.11e},{:.11e},{:.11e},{:.11e},{:.11e},{:.11e},{secs:.11e}",
                            r.iterations, r.lambda_reached, rep.v_min, rep.v_max, rep.v_mean, rep.v_diff, rep.v_unb
                        ),
                        Err(_) => format!("{f:.11e},false,{},{:.11e},,,,,,{secs:.11e}", r.iterations, r.lambda_reached),
                    })
                })
                .collect();
            let mut text = String::from("factor,converged,iterations,lambda,v_min,v_max,v_mean,v_diff,v_unb,seconds\n");
            let mut all_ok = true;
            for r in rows {
                let line = r?;
                all_ok &= line.split(',').nth(1) == Some("true");
                text.push_str(&line);
                text.push('\n');
            }
            match &out {
                Some(p) => std::fs::write(p, &text).map_err(io_err(p))?,
                None => print!("{text}"),
            }
            Ok(if all_ok { EXIT_OK } else { EXIT_NOT_CONVERGED })
        }
        Command::Oracle {
            case,
            ibdg,
            samples,
            waveform,
            opts,
        } => {
            let (c, net) = read_case(&case)?;
            let k = net
                .ibdgs()
                .iter()
                .position(|d| d.id == ibdg)
                .ok_or_else(|| format!("no ibdg with id {ibdg}"))?;
            let o = options(&c, &opts);
            let result = run_solve(&net, &o)?;
            if !result.converged {
                eprintln!("solve did not converge; the oracle needs a solved operating point");
                return Ok(EXIT_NOT_CONVERGED);
            }
            let d = &net.ibdgs()[k];
            let v = result.voltage(d.bus).expect("device bus is in the result");
            let rep = oracle_check(d, v, result.q3g[k], samples).map_err(|e| e.to_string())?;
            println!("ibdg {} at bus {}: P3G = {:.6}, Q3G = {:.6}", d.id, d.bus, d.p3g, result.q3g[k]);
            println!("peak current  formula {:?}", rep.formula_peaks.map(|x| (x * 1e6).round() / 1e6));
            println!("peak current  sampled {:?}", rep.measured_peaks.map(|x| (x * 1e6).round() / 1e6));
            println!("max relative error    {:.3e}", rep.max_rel_error);
            println!(
                "Q max {:.6} (phase {}), sampled peak at Q max {:.6}, at 1.05 Q max {:.6}, rating {:.6}",
                rep.q_max.value, rep.q_max.limiting_phase, rep.peak_at_q_max, rep.peak_above_q_max, d.i_rating
            );
            println!("sampled P3G {:.6}", rep.measured_p3g);
            if let Some(p) = &waveform {
                let mut w = create(p)?;
                rep.waveform.write_csv(&mut w).and_then(|_| w.flush()).map_err(io_err(p))?;
            }
            let ok = rep.max_rel_error <= 2e-3
                && (rep.peak_at_q_max / d.i_rating - 1.0).abs() <= 5e-3
                && rep.peak_above_q_max > d.i_rating;
            println!("{}", if ok { "oracle checks passed" } else { "oracle checks FAILED" });
            Ok(if ok { EXIT_OK } else { EXIT_NOT_CONVERGED })
        }
        Command::Synth {
            placement,
            seed,
            penetration,
            k1,
            k2,
            out,
        } => {
            let case = synthetic_feeder(&FeederSpec {
                seed,
                placement,
                penetration,
                k1,
                k2,
                ..Default::default()
            });
            std::fs::write(&out, serialize_case(&case)).map_err(io_err(&out))?;
            Ok(EXIT_OK)
        }
    }
}

/// Parses `start:stop:step` into the inclusive list of factors.
pub fn parse_range(s: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, h] = parts.as_slice() else {
        return Err(format!("range {s:?} must be start:stop:step"));
    };
    let num = |x: &str| -> Result<f64, String> {
        let bad = || format!("bad number {x:?} in range {s:?}");
        match x.split_once('/') {
            Some((n, d)) => Ok(n.trim().parse::<f64>().map_err(|_| bad())? / d.trim().parse::<f64>().map_err(|_| bad())?),
            None => x.trim().parse().map_err(|_| bad()),
        }
    };
    let (a, b, h) = (num(a)?, num(b)?, num(h)?);
    if !(h > 0.0 && b >= a && a.is_finite() && b.is_finite()) {
        return Err(format!("range {s:?} needs start <= stop and a positive step"));
    }
    let n = ((b - a) / h + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| if i == n && ((a + n as f64 * h) - b).abs() < 1e-9 { b } else { a + i as f64 * h }).collect())
}
