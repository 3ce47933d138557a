use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use diffhmm_cli::config::RunConfig;
use diffhmm_cli::output::Summary;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffhmm")).args(args).output().unwrap()
}

fn small_with(edit: impl Fn(String) -> String, dir: &Path) -> PathBuf {
    let text = edit(std::fs::read_to_string(config("ou1d_small.toml")).unwrap());
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn summary(dir: &Path) -> Summary {
    toml::from_str(&std::fs::read_to_string(dir.join("summary.toml")).unwrap()).unwrap()
}

#[test]
fn certify_passes_on_ou_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = run(&["certify", "--config", config("ou1d.toml").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    assert!(s.passed && s.criteria["certificate"]);
    let csv = std::fs::read_to_string(out.join("certificate.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("node,x0,V,W,H,slack,in_c"));
    assert_eq!(csv.lines().count(), 482);
}

#[test]
fn certify_without_constant_fails_with_worst_node() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_with(|t| t.replace("b = 1.5", "b = 0.0"), tmp.path());
    let out = tmp.path().join("out");
    let o = run(&["certify", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let s = summary(&out);
    assert!(!s.criteria["certificate"]);
    assert_eq!(s.notes["worst_node_coords"], "[0.0]");
    assert!(s.constants["worst_slack"] > 0.0);
}

#[test]
fn missing_grid_is_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_with(|t| t.replace("[grid]\nbounds = [[-6.0, 6.0]]\nresolution = [121]\n", ""), tmp.path());
    let o = run(&["certify", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid"));
}

#[test]
fn tight_target_with_coarse_rank_is_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_with(|t| t.replace("epsilon = 0.1", "epsilon = 1e-6").replace("cells_per_axis = 16", "cells_per_axis = 4"), tmp.path());
    let out = tmp.path().join("out");
    let o = run(&["approximate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let s = summary(&out);
    assert!(!s.criteria["resolvent"]);
    let gaps = std::fs::read_to_string(out.join("resolvent_gaps.csv")).unwrap();
    assert_eq!(gaps.lines().count(), 4);
}

#[test]
fn approximate_exit_status_is_conjunction_of_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    for name in ["ou1d_small.toml", "ou1d_kappa20.toml"] {
        let out = tmp.path().join(name);
        let o = run(&["approximate", "--config", config(name).to_str().unwrap(), "--out", out.to_str().unwrap()]);
        let s = summary(&out);
        assert_eq!(s.passed, s.criteria.values().all(|&p| p));
        assert_eq!(o.status.code(), Some(if s.passed { 0 } else { 1 }));
    }
}

#[test]
fn narrow_alpha_range() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_with(|t| t.replace("delta = 0.5", "delta = 0.9"), tmp.path());
    let out = tmp.path().join("out");
    run(&["approximate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let gaps = std::fs::read_to_string(out.join("resolvent_gaps.csv")).unwrap();
    let alphas: Vec<f64> = gaps.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(alphas, vec![0.9, 1.0, 1.0 / 0.9]);
}

#[test]
fn spectrum_files_for_ou() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = run(&["spectrum", "--config", config("ou1d_small.toml").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(out.join("spectrum_resolvent.csv")).unwrap();
    let lead: Vec<f64> = text.lines().skip(1).take(4).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    for (z, e) in lead.iter().zip([1.0, 0.5, 1.0 / 3.0, 0.25]) {
        assert!((z - e).abs() < 0.05 * e, "{lead:?}");
    }
    let reduced = std::fs::read_to_string(out.join("spectrum_hmm_generator.csv")).unwrap();
    assert_eq!(reduced.lines().count(), 1 + 17);
}

#[test]
fn two_cell_hmm_has_three_reduced_eigenvalues() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_with(|t| t.replace("cells_per_axis = 16", "cells_per_axis = 2"), tmp.path());
    let out = tmp.path().join("out");
    run(&["spectrum", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let reduced = std::fs::read_to_string(out.join("spectrum_hmm_generator.csv")).unwrap();
    assert_eq!(reduced.lines().count(), 1 + 3);
}

#[test]
fn summary_echo_reparses() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    run(&["certify", "--config", config("doublewell1d.toml").to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "9"]);
    let s = summary(&out);
    let original = RunConfig::load(&config("doublewell1d.toml")).unwrap();
    let echoed = RunConfig::from_toml(&toml::to_string(&s.config).unwrap()).unwrap();
    assert_eq!(echoed.simulation.seed, 9);
    assert_eq!(RunConfig { simulation: original.simulation.clone(), ..echoed.clone() }, original);
}

#[test]
fn seed_changes_simulation_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("ou1d_small.toml");
    for seed in ["1", "2"] {
        let out = tmp.path().join(seed);
        run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", seed]);
    }
    let a = std::fs::read(tmp.path().join("1/resolvent_mc.csv")).unwrap();
    let b = std::fs::read(tmp.path().join("2/resolvent_mc.csv")).unwrap();
    assert_ne!(a, b);
}
