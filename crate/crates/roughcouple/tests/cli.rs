//! End-to-end runs of the `roughcouple` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_roughcouple"));
    c.env_remove("ROUGHCOUPLE_OUT");
    c
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("roughcouple-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str], config: Option<&Path>, out: &Path) -> Output {
    let mut c = bin();
    if let Some(p) = config {
        c.arg("--config").arg(p);
    }
    c.arg("--out").arg(out).args(args).output().unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.cfg");
    fs::write(
        &p,
        "# short coupling runs\nhorizon = 8\nburn_in = 2\nlevel = 5\npast_window = 64\npast_uniform = 2\nreplicas = 4\ncalibration = 5\nvalidation = 5\nsamples = 3\n",
    )
    .unwrap();
    p
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_key_exits_2_and_names_key() {
    let dir = scratch("badkey");
    for (text, key) in [("gamma = 0.9\n", "gamma"), ("wobble = 1\n", "wobble"), ("level = x\n", "level")] {
        let cfg = dir.join("bad.cfg");
        fs::write(&cfg, text).unwrap();
        let out = run(&["hit"], Some(&cfg), &dir);
        assert_eq!(out.status.code(), Some(2), "{text}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(key), "{text}: {err}");
    }
    let out = run(&["hit"], Some(&dir.join("missing.cfg")), &dir);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_3() {
    let dir = scratch("blowup");
    let cfg = dir.join("huge.cfg");
    fs::write(&cfg, "hit_scale = 1e300\n").unwrap();
    let out = run(&["hit"], Some(&cfg), &dir);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"status\":3"));
}

#[test]
fn pipelines_write_their_artifacts() {
    let dir = scratch("pipelines");
    let cfg = small_config(&dir);
    for (cmd, files) in [
        ("sample-fbm", &["fbm.csv", "fbm.json"][..]),
        ("lift", &["lift_path.csv", "lift_area.csv", "lift.json"]),
        ("solve", &["solve.csv", "solve_driver.csv", "solve.json"]),
        ("lyapunov", &["lyapunov_calibration.csv", "lyapunov_validation.csv", "lyapunov.json"]),
        ("hit", &["hit.csv", "hit.json"]),
        ("couple", &["coupling_times.csv", "summary.json", "traces/trace_00000.csv"]),
        ("rate", &["tail.csv", "rate.json"]),
    ] {
        let out = run(&[cmd], Some(&cfg), &dir);
        assert_eq!(out.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        for f in files {
            assert!(!read(&dir, f).is_empty(), "{cmd}: {f}");
        }
    }
    let fbm = String::from_utf8(read(&dir, "fbm.csv")).unwrap();
    assert_eq!(fbm.lines().next().unwrap(), "t,x0_1,x1_1,x2_1");
    assert_eq!(fbm.lines().count(), 1 + 33);
    let json: serde_json::Value = serde_json::from_slice(&read(&dir, "summary.json")).unwrap();
    assert_eq!(json["replicas"].as_array().unwrap().len(), 4);
}

#[test]
fn same_seed_gives_identical_csvs() {
    let a = scratch("det-a");
    let b = scratch("det-b");
    let cfg = small_config(&a);
    for (dir, threads) in [(&a, "1"), (&b, "3")] {
        for cmd in ["sample-fbm", "couple"] {
            let out = run(&[cmd, "--seed", "77", "--threads", threads], Some(&cfg), dir);
            assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        }
    }
    for f in ["fbm.csv", "coupling_times.csv", "tail.csv", "traces/trace_00000.csv", "traces/trace_00003.csv"] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
    let c = scratch("det-c");
    let out = run(&["sample-fbm", "--seed", "78"], Some(&cfg), &c);
    assert_eq!(out.status.code(), Some(0));
    assert_ne!(read(&a, "fbm.csv"), read(&c, "fbm.csv"));
}

#[test]
fn out_dir_falls_back_to_env() {
    let dir = scratch("env");
    let out = bin().env("ROUGHCOUPLE_OUT", &dir).args(["hit", "--level", "5"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("hit.csv").exists());
}
