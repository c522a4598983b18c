use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gradflow"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

struct Scratch(PathBuf);

impl Scratch {
    fn new(tag: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("gradflow-cli-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        Scratch(dir)
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn euclidean_run_writes_outputs_and_passes() {
    let s = Scratch::new("euclid");
    let cfg = configs().join("euclidean.json");
    let o = run(&["euclidean", "--config", cfg.to_str().unwrap(), "--out-dir", s.0.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["trajectory.csv", "gap.json", "summary.json", "manifest.json"] {
        assert!(s.0.join(f).is_file(), "missing {f}");
    }
    let header = fs::read_to_string(s.0.join("trajectory.csv")).unwrap();
    assert!(header.starts_with("t,x_1,x_2,u_1,u_2,f,grad_norm_sq,running_action\n"));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(s.0.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["kind"], "euclidean");
    assert_eq!(manifest["passed"], true);
}

#[test]
fn negative_dt_is_a_config_error_naming_the_field() {
    let cfg = configs().join("euclidean.json");
    let o = run(&["euclidean", "--config", cfg.to_str().unwrap(), "--dt", "-0.1", "--check"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dt:"), "{}", stderr(&o));
}

#[test]
fn unknown_objective_and_kind_are_rejected() {
    let s = Scratch::new("unknown");
    let path = s.0.join("bad.json");
    fs::write(
        &path,
        r#"{"objective": {"name": "rosenbrok"}, "initial": {"kind": "point", "x": [0, 0]}, "t_final": 1, "dt": 0.01}"#,
    )
    .unwrap();
    let o = run(&["newton", "--config", path.to_str().unwrap(), "--check"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("rosenbrok"), "{}", stderr(&o));

    let o = run(&["gradient-descent", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    fs::write(&path, r#"{"dt": 0.01, "stepsize": 3}"#).unwrap();
    let o = run(&["euclidean", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stepsize"), "{}", stderr(&o));
}

#[test]
fn check_mode_accepts_every_shipped_config() {
    for (sub, file) in [
        ("euclidean", "euclidean.json"),
        ("newton", "newton.json"),
        ("sgd", "sgd.json"),
        ("fokker-planck", "fokker_planck.json"),
        ("product", "product.json"),
    ] {
        let cfg = configs().join(file);
        let o = run(&[sub, "--config", cfg.to_str().unwrap(), "--check"]);
        assert_eq!(o.status.code(), Some(0), "{sub}: {}", stderr(&o));
    }
}

#[test]
fn manifest_config_reproduces_the_run() {
    let a = Scratch::new("manifest-a");
    let b = Scratch::new("manifest-b");
    let cfg = configs().join("sgd.json");
    let o = run(&["sgd", "--config", cfg.to_str().unwrap(), "--out-dir", a.0.to_str().unwrap(), "--seed", "9"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let manifest: Value = serde_json::from_str(&fs::read_to_string(a.0.join("manifest.json")).unwrap()).unwrap();
    let mut echoed = manifest["config"].clone();
    assert_eq!(echoed["seed"], 9);
    echoed["out_dir"] = Value::String(b.0.to_str().unwrap().into());
    let replay = a.0.join("replay.json");
    fs::write(&replay, serde_json::to_string(&echoed).unwrap()).unwrap();
    let o = run(&["sgd", "--config", replay.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let first = fs::read(a.0.join("trajectory.csv")).unwrap();
    let second = fs::read(b.0.join("trajectory.csv")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn fokker_planck_writes_snapshots() {
    let s = Scratch::new("fp");
    let cfg = configs().join("fokker_planck.json");
    let o = run(&[
        "fokker-planck",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        s.0.to_str().unwrap(),
        "--t-final",
        "0.1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(s.0.join("report.csv").is_file());
    let snaps = fs::read_dir(s.0.join("snapshots")).unwrap().count();
    assert!(snaps >= 2, "{snaps}");
}

#[test]
fn help_exits_zero() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("fokker-planck"));
}
