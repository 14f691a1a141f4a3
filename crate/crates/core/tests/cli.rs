mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::*;
use ibdg_flow::case::load_case;
use ibdg_flow::report::{report, UnbalanceDefinition};
use ibdg_flow::solver::solve;

fn ibdgflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ibdgflow")).args(args).output().unwrap()
}

fn corpus_path(name: &str) -> String {
    corpus_dir().join(name).to_string_lossy().into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_minimal_case() {
    let out = ibdgflow(&["validate", &corpus_path("01_minimal.toml")]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("2 buses"));
}

#[test]
fn validate_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "schema_version = 1\nbase_mva = 1.0\nbase_kv = 12.47\ncolour = 3\n").unwrap();
    let out = ibdgflow(&["validate", path_str(&p)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
    assert_eq!(ibdgflow(&["validate", "/nonexistent/case.toml"]).status.code(), Some(2));
    assert_eq!(ibdgflow(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn infeasible_solve_exits_one_and_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let out = ibdgflow(&["solve", &corpus_path("11_infeasible.toml"), "--homotopy", "--trace", path_str(&trace)]);
    assert_eq!(out.status.code(), Some(1));
    let text = std::fs::read_to_string(&trace).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("iter,update_norm,kcl_norm,lambda"));
    assert!(lines.count() > 10);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stalled"));
}

#[test]
fn pvpq_oscillation_exits_one() {
    let out = ibdgflow(&["solve", &corpus_path("10_pvpq_oscillation.toml")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("oscillated"));
}

#[test]
fn report_file_matches_library_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("report.csv");
    let case = corpus_path("16_two_ibdgs.toml");
    let out = ibdgflow(&["solve", &case, "--out", path_str(&csv)]);
    assert_eq!(out.status.code(), Some(0));
    let summary = String::from_utf8_lossy(&out.stdout);
    assert!(summary.contains("v_unb"), "{summary}");

    let (c, net) = load_case(&std::fs::read_to_string(&case).unwrap()).unwrap();
    let r = solve(&net, &c.solver_options()).unwrap();
    let mut buf = Vec::new();
    report(&r, &net, UnbalanceDefinition::Sequence).unwrap().write_csv(&mut buf).unwrap();
    assert_eq!(std::fs::read(&csv).unwrap(), buf);
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("bus,phase,v_mag,v_ang_deg\n"));
    assert!(text.contains("\nmetric,value\n"));
}

#[test]
fn sweep_emits_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let out = ibdgflow(&["sweep", &corpus_path("16_two_ibdgs.toml"), "--penetration", "0:1:1/4", "--out", path_str(&csv)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "factor,converged,iterations,lambda,v_min,v_max,v_mean,v_diff,v_unb,seconds");
    assert_eq!(lines.len(), 1 + 5);
    let factors: Vec<f64> = lines[1..].iter().map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(factors, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    assert!(lines[1..].iter().all(|l| l.split(',').nth(1) == Some("true")));
}

#[test]
fn oracle_passes_on_a_solved_device() {
    let dir = tempfile::tempdir().unwrap();
    let wave = dir.path().join("wave.csv");
    let out = ibdgflow(&["oracle", &corpus_path("13_ibdg_fpnsc.toml"), "--ibdg", "1", "--waveform", path_str(&wave)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = std::fs::read_to_string(&wave).unwrap();
    assert!(text.starts_with("time,ia,ib,ic\n"));
    assert_eq!(text.lines().count(), 1 + ibdg_flow::waveform::DEFAULT_SAMPLES);
    assert_eq!(ibdgflow(&["oracle", &corpus_path("13_ibdg_fpnsc.toml"), "--ibdg", "9"]).status.code(), Some(2));
}

#[test]
fn synth_writes_a_valid_case() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("feeder.toml");
    let out = ibdgflow(&["synth", "--placement", "center", "--penetration", "0.4", "--out", path_str(&p)]);
    assert_eq!(out.status.code(), Some(0));
    let (_, net) = load_case(&std::fs::read_to_string(&p).unwrap()).unwrap();
    assert_eq!(net.buses().len(), 50);
    assert_eq!(net.ibdgs().len(), 10);
    assert_eq!(ibdgflow(&["synth", "--placement", "north", "--out", path_str(&p)]).status.code(), Some(2));
}
