//! End-to-end runs of the `qndsim` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const QUBIT_MODEL: &str = "[system]\ndim = 2\n[channel]\nkind = diffusive\nc = 1, -1\n";

fn qndsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qndsim")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn run_file(run: &str, model: &str) -> String {
    format!("[run]\n{run}\n{model}")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn status_of<'a>(report: &'a Value, name: &str) -> &'a str {
    report["tests"]
        .as_array()
        .unwrap()
        .iter()
        .find(|t| t["name"] == name)
        .unwrap_or_else(|| panic!("no entry {name}"))["status"]
        .as_str()
        .unwrap()
}

const SMALL: &str = "experiment = verify_all\nq0 = 0.3, 0.7\nT = 5\ndt = 0.001\nN = 300\nseed = 1\n\
checkpoints = 1, 2, 5\nsave_trajectories = 2\nstride = 1\n";

#[test]
fn help_lists_exit_codes() {
    let o = qndsim(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for c in ["0 ", "1 ", "2 ", "3 ", "4 ", "5 "] {
        assert!(text.contains(&format!("  {c}")), "{text}");
    }
}

#[test]
fn missing_config_is_an_io_error() {
    let o = qndsim(&["--config", "/nonexistent/run.toml"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn parse_error_names_the_line() {
    let d = TempDir::new().unwrap();
    let cfg = write(d.path(), "run.toml", &run_file("q0 = 0.3, 0.7\nN = many", QUBIT_MODEL));
    let o = qndsim(&["--config", &cfg]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn step_size_guard_is_a_config_error() {
    let d = TempDir::new().unwrap();
    let model = "[system]\ndim = 2\n[channel]\nkind = counting\nc = 20, 1\n";
    let cfg = write(d.path(), "run.toml", &run_file("T = 1\ndt = 0.001\nN = 10", model));
    let o = qndsim(&["--config", &cfg]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("step-size guard"), "{}", stderr(&o));
}

#[test]
fn conditioned_requires_gamma() {
    let d = TempDir::new().unwrap();
    let cfg = write(d.path(), "run.toml", &run_file("experiment = conditioned\nT = 1\nN = 10", QUBIT_MODEL));
    assert_eq!(code(&qndsim(&["--config", &cfg])), 2);
}

#[test]
fn conditioning_on_an_impossible_pointer_is_a_numerical_error() {
    let d = TempDir::new().unwrap();
    let run = "experiment = conditioned\ngamma = 0\nq0 = 0, 1\nT = 1\nN = 10";
    let cfg = write(d.path(), "run.toml", &run_file(run, QUBIT_MODEL));
    let out = d.path().join("out");
    let o = qndsim(&["--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn non_diagonal_model_is_reported_not_applicable() {
    let d = TempDir::new().unwrap();
    let model = "[system]\ndim = 2\n[channel]\nkind = diffusive\nC = 0, 1, 0, 0\n";
    let cfg = write(d.path(), "run.toml", &run_file("experiment = simulate\nT = 1\nN = 20", model));
    let out = d.path().join("out");
    let o = qndsim(&["--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let report = read_json(&out.join("report.json"));
    assert_eq!(status_of(&report, "nondemolition"), "fail");
    assert_eq!(status_of(&report, "martingale"), "not_applicable");
    assert_eq!(status_of(&report, "born"), "not_applicable");
}

#[test]
fn verify_all_writes_a_passing_report() {
    let d = TempDir::new().unwrap();
    let cfg = write(d.path(), "run.toml", &run_file(SMALL, QUBIT_MODEL));
    let out = d.path().join("out");
    let o = qndsim(&["--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["model_hash"].as_str().unwrap().len(), 64);
    assert_eq!(report["passed"], true);
    let config = report["config"].as_object().unwrap();
    assert!(!config.contains_key("out") && !config.contains_key("workers"));
    assert_eq!(config["N"], 300);
    for f in ["summary.json", "filter.csv", "trajectories/traj_00000.csv", "trajectories/traj_00001.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let sidecar = read_json(&out.join("trajectories/traj_00001.json"));
    assert_eq!(sidecar["model_hash"], report["model_hash"]);
}

#[test]
fn artifacts_do_not_depend_on_worker_count() {
    let d = TempDir::new().unwrap();
    let cfg = write(d.path(), "run.toml", &run_file(SMALL, QUBIT_MODEL));
    let one = d.path().join("w1");
    let many = d.path().join("w4");
    assert_eq!(code(&qndsim(&["--config", &cfg, "--workers", "1", "--out", one.to_str().unwrap()])), 0);
    assert_eq!(code(&qndsim(&["--config", &cfg, "--workers", "4", "--out", many.to_str().unwrap()])), 0);
    assert_eq!(tree(&one), tree(&many));
}

#[test]
fn replay_reproduces_the_stored_filter() {
    let d = TempDir::new().unwrap();
    let model = write(d.path(), "qubit.model", QUBIT_MODEL);
    let cfg = write(d.path(), "run.toml", &run_file(&format!("model = qubit.model\n{SMALL}"), ""));
    let out = d.path().join("out");
    assert_eq!(code(&qndsim(&["--config", &cfg, "--out", out.to_str().unwrap()])), 0);
    let traj = out.join("trajectories/traj_00000.csv");
    let traj = traj.to_str().unwrap();

    let replay = |name: &str, extra: &[&str]| {
        let dir = d.path().join(name);
        let mut args = vec!["replay", "--trajectory", traj, "--model", &model, "--out", dir.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = qndsim(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        dir
    };
    let a = replay("r1", &["--q-tilde0", "0.3,0.7"]);
    let b = replay("r2", &["--q-tilde0", "0.3,0.7"]);
    let s = read_json(&a.join("summary.json"));
    assert_eq!(s["identical_to_stored"], true);
    assert_eq!(s["max_trace_distance"], 0.0);
    assert_eq!(fs::read(a.join("filter.csv")).unwrap(), fs::read(b.join("filter.csv")).unwrap());

    let u = replay("r3", &[]);
    let s = read_json(&u.join("summary.json"));
    assert!(s["final_trace_distance"].as_f64().unwrap() <= 0.01);
}

#[test]
fn replay_refuses_thinned_trajectories() {
    let d = TempDir::new().unwrap();
    let model = write(d.path(), "qubit.model", QUBIT_MODEL);
    let run = "model = qubit.model\nexperiment = simulate\nT = 1\nN = 2\nsave_trajectories = 1\nstride = 10";
    let cfg = write(d.path(), "run.toml", &run_file(run, ""));
    let out = d.path().join("out");
    let o = qndsim(&["--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(out.join("trajectories/traj_00000.csv").is_file(), "{}", stderr(&o));
    let traj = out.join("trajectories/traj_00000.csv");
    let o = qndsim(&["replay", "--trajectory", traj.to_str().unwrap(), "--model", &model, "--out",
        d.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn replay_rejects_malformed_csv() {
    let d = TempDir::new().unwrap();
    let model = write(d.path(), "qubit.model", QUBIT_MODEL);
    let traj = write(d.path(), "bad.csv", "t,q0,q1,y0\n0,0.3,0.7,0\n0.001,oops,0.7,0.1\n");
    let o = qndsim(&["replay", "--trajectory", &traj, "--model", &model, "--out", d.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}
