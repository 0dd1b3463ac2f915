use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn uot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uot")).args(args).output().expect("spawn uot")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn dirac_pair_divergence() {
    let dir = TempDir::new().unwrap();
    let a = write(dir.path(), "a.json", r#"{"weights":[1.0],"points":[[0.0]]}"#);
    let b = write(dir.path(), "b.csv", "w,x1\n1.0,1.7320508075688772\n");
    for kind in ["ot", "s"] {
        let v = stdout_json(&uot(&["div", s(&a), s(&b), "--kind", kind, "--tol", "1e-13"]));
        let got = v["value"].as_f64().unwrap();
        assert!((got - 1.8963616764856731).abs() < 1e-9, "{kind}: {got}");
    }
}

#[test]
fn solve_writes_potentials() {
    let dir = TempDir::new().unwrap();
    let a = write(dir.path(), "a.json", r#"{"weights":[1.0],"points":[[0.0]]}"#);
    let b = write(dir.path(), "b.json", r#"{"weights":[1.0],"points":[[1.7320508075688772]]}"#);
    let out = dir.path().join("pots.json");
    let o = uot(&["solve", s(&a), s(&b), "--tol", "1e-13", "-o", s(&out)]);
    assert!(o.status.success());
    let v: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    // f = rho c / (2 rho + eps) = 1.
    assert!((v["f"][0].as_f64().unwrap() - 1.0).abs() < 1e-10);
    assert_eq!(v["status"], "Converged");
}

#[test]
fn infeasible_range_exits_with_two() {
    let dir = TempDir::new().unwrap();
    let a = write(dir.path(), "a.json", r#"{"weights":[0.2],"points":[[0.0]]}"#);
    let b = write(dir.path(), "b.json", r#"{"weights":[5.0],"points":[[0.5]]}"#);
    let o = uot(&["div", s(&a), s(&b), "--entropy", "range:a=0.5,b=1.5", "--kind", "ot"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("infeasible"));
}

#[test]
fn bad_input_exits_with_one() {
    let dir = TempDir::new().unwrap();
    let a = write(dir.path(), "a.json", r#"{"weights":[1.0],"points":[[0.0]]}"#);
    let o = uot(&["div", s(&a), s(&a), "--entropy", "hellinger:rho=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown entropy"));
    let bad = write(dir.path(), "bad.json", r#"{"weights":[-1.0],"points":[[0.0]]}"#);
    assert_eq!(uot(&["div", s(&bad), s(&a)]).status.code(), Some(1));
    assert_eq!(uot(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(uot(&["--help"]).status.code(), Some(0));
}

#[test]
fn flow_with_zero_steps_returns_the_input() {
    let dir = TempDir::new().unwrap();
    let init = write(dir.path(), "init.csv", "w,x1,x2\n0.25,0.1,0.2\n0.75,0.3,0.4\n");
    let target = write(dir.path(), "target.csv", "w,x1,x2\n1.0,0.6,0.7\n");
    let out = dir.path().join("run");
    let o = uot(&["flow", s(&init), s(&target), "-o", s(&out), "--steps", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<_> =
        fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["step_000000.csv", "summary.csv"]);
    let text = fs::read_to_string(out.join("step_000000.csv")).unwrap();
    let rows: Vec<Vec<f64>> =
        text.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    let want = [[0.0, 0.0, 0.1, 0.2, 0.25], [0.0, 1.0, 0.3, 0.4, 0.75]];
    for (r, w) in rows.iter().zip(want) {
        for (x, y) in r.iter().zip(w) {
            assert!((x - y).abs() <= 1e-15, "{r:?}");
        }
    }
}

#[test]
fn flow_output_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let init = dir.path().join("init.csv");
    let target = dir.path().join("target.csv");
    assert!(uot(&["gen", "-o", s(&init), "-n", "15", "--seed", "3"]).status.success());
    assert!(uot(&["gen", "-o", s(&target), "-n", "12", "--seed", "4", "--lo", "0.5", "--hi", "1.5"]).status.success());
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let args = [
            "--threads",
            threads,
            "flow",
            s(&init),
            s(&target),
            "-o",
            s(&out),
            "--steps",
            "5",
            "--eps",
            "0.05",
            "--mass-rate",
            "eta-r",
        ];
        assert!(uot(&args).status.success());
        (fs::read(out.join("step_000005.csv")).unwrap(), fs::read(out.join("summary.csv")).unwrap())
    };
    let first = run("r1", "1");
    assert_eq!(first, run("r2", "1"));
    assert_eq!(first, run("r3", "2"));
}

#[test]
fn gen_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let p1 = dir.path().join("a.json");
    let p2 = dir.path().join("b.json");
    for p in [&p1, &p2] {
        assert!(uot(&["gen", "-o", s(p), "-n", "20", "--dim", "3", "--mass", "2.5", "--seed", "9"]).status.success());
    }
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    let v: Value = serde_json::from_slice(&fs::read(&p1).unwrap()).unwrap();
    let total: f64 = v["weights"].as_array().unwrap().iter().map(|w| w.as_f64().unwrap()).sum();
    assert!((total - 2.5).abs() < 1e-12);
    assert_eq!(v["points"][0].as_array().unwrap().len(), 3);
}

#[test]
fn grad_matches_closed_form() {
    let dir = TempDir::new().unwrap();
    let a = write(dir.path(), "a.json", r#"{"weights":[1.0],"points":[[0.0]]}"#);
    let b = write(dir.path(), "b.json", r#"{"weights":[1.0],"points":[[1.0]]}"#);
    let v = stdout_json(&uot(&["grad", s(&a), s(&b), "--kind", "ot", "--tol", "1e-13"]));
    // 2 t (x - y) with t = e^{-1/3}.
    let want = -2.0 * (-1.0f64 / 3.0).exp();
    assert!((v["d_points"][0][0].as_f64().unwrap() - want).abs() < 1e-9);
}

#[test]
fn self_check_passes() {
    let v = stdout_json(&uot(&["check", "--seed", "1"]));
    assert_eq!(v["passed"], true);
    assert!(!v["checks"].as_array().unwrap().is_empty());
}
