use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use snstoch::io::sha256_hex;

const SMALL: &str = r#"
[lattice]
points_per_axis = 16
length = 8.0

[kernel]
regularizer = "gaussian"
sigma_k = 1.0
lambda0 = 0.5

[dynamics]
unraveling = "pdp"
dt = 0.01
t_final = 0.1
output_times = [0.0, 0.05, 0.1]

[ensemble]
trajectories = 32
master_seed = 4

[initial]
packets = [{ center = [0.0], width = 1.0 }]
"#;

fn snstoch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snstoch"))
        .args(args)
        .env_remove("SNSTOCH_WORKERS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_configs_are_valid() {
    let mut seen = 0;
    for entry in fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let out = snstoch(&["check", "-c", path.to_str().unwrap()]);
            assert!(out.status.success(), "{}: {}", path.display(), String::from_utf8_lossy(&out.stderr));
            seen += 1;
        }
    }
    assert!(seen >= 4);
}

#[test]
fn invalid_config_exits_with_code_2_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("points_per_axis = 16", "points_per_axis = 48"));
    let out = snstoch(&["ensemble", "-c", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lattice.points_per_axis"), "{err}");
    assert!(err.contains("points_per_axis must be a power of two"), "{err}");
}

#[test]
fn compare_writes_a_checksummed_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = dir.path().join("cmp");
    let out = snstoch(&["compare", "-c", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: Value = serde_json::from_slice(&fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "compare");
    assert_eq!(manifest["master_seed"], 4);
    let files = manifest["files"].as_array().unwrap();
    let names: Vec<&str> = files.iter().map(|f| f["name"].as_str().unwrap()).collect();
    for expected in ["distance.csv", "observables.csv", "rho_final.bin"] {
        assert!(names.contains(&expected), "{names:?}");
    }
    for f in files {
        let bytes = fs::read(run.join(f["name"].as_str().unwrap())).unwrap();
        assert_eq!(f["sha256"], sha256_hex(&bytes));
    }
    let distance = fs::read_to_string(run.join("distance.csv")).unwrap();
    assert!(distance.starts_with("t,trace_distance,mc_se_bound"));
    assert_eq!(distance.lines().count(), 4);
}

#[test]
fn worker_count_does_not_change_ensemble_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (out, w) in [(&a, "1"), (&b, "3")] {
        let o = snstoch(&["ensemble", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--workers", w]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["observables.csv", "rho_final.bin"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn bad_worker_env_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = Command::new(env!("CARGO_BIN_EXE_snstoch"))
        .args(["ensemble", "-c", cfg.to_str().unwrap()])
        .env("SNSTOCH_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn trajectory_dumps_states_at_output_times() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = dir.path().join("traj");
    let out = snstoch(&["trajectory", "--index", "5", "-c", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for i in 0..3 {
        assert!(run.join(format!("state_{i:04}.bin")).exists());
    }
    assert!(run.join("jumps.csv").exists());
}

#[test]
fn deterministic_free_flow_passes_its_gate() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("free");
    let cfg = configs_dir().join("free_dispersion.toml");
    let out = snstoch(&["deterministic", "-c", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let energy = fs::read_to_string(run.join("energy.csv")).unwrap();
    assert!(energy.starts_with("t,energy,relative_energy_change,x_variance,free_variance"));
}

#[test]
fn physical_flag_warns_about_underflow() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}\n[physical]\nmass_kg = 1e-25\nlength_m = 1e-7\n");
    let cfg = write_config(dir.path(), &text);
    let out = snstoch(&["check", "--physical", "-c", cfg.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("physical Λ₀"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("underflow"));
}
