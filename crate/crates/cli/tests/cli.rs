use std::path::Path;
use std::process::{Command, Output};

fn occkde(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_occkde")).args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "occkde {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json_file(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn simulate_estimate_and_transport() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("path.csv");
    let est = dir.path().join("est.json");
    let w2 = dir.path().join("w2.json");
    let pts = dir.path().join("pts.csv");
    occkde(&[
        "simulate", "--manifold", "torus:d=2,s=1", "--density", "trig:a1=0.5", "--generator", "langevin",
        "--T", "20", "--dt", "1e-3", "--seed", "7", "--out", path.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("# manifold=torus:d=2,s=1\n"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 20_001);

    occkde(&[
        "estimate", "--path", path.to_str().unwrap(), "--kernel", "poly:r=2", "--h", "0.2", "--grid", "32",
        "--out", est.to_str().unwrap(),
    ]);
    let e = json_file(&est);
    assert_eq!(e["schema_version"], 1);
    assert!((e["estimate"]["mass"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(e["estimate"]["positivity_ok"], true);
    assert_eq!(e["estimate"]["values"].as_array().unwrap().len(), 32 * 32);

    std::fs::write(&pts, "x1,x2\n0.1,0.2\n0.6,0.7\n0.3,0.9\n").unwrap();
    occkde(&[
        "w2", "--a", est.to_str().unwrap(), "--b", pts.to_str().unwrap(), "--manifold", "torus:d=2,s=1",
        "--solver", "exact", "--out", w2.to_str().unwrap(),
    ]);
    let r = json_file(&w2);
    assert!(r["cost"].as_f64().unwrap() > 0.0);
    assert_eq!(r["solver"]["kind"], "exact");
    assert!(r["marginal_residual"].as_f64().unwrap() < 1e-9);

    let out = occkde(&["w2", "--a", pts.to_str().unwrap(), "--b", pts.to_str().unwrap(), "--manifold", "torus:d=2,s=1"]);
    let same: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(same["cost"].as_f64().unwrap().abs() < 1e-15);
}

#[test]
fn peyre_reports_bound_and_modes() {
    let dir = tempfile::tempdir().unwrap();
    let modes = dir.path().join("modes.csv");
    let out = occkde(&["peyre", "--p1", "trig:a1=0.3", "--p2", "uniform", "--grid", "128", "--modes", modes.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    // One cosine mode: (4 / 0.7) · 2 · (0.3/2)² / (2π)².
    let expect = 4.0 / 0.7 * 2.0 * 0.0225 / (4.0 * std::f64::consts::PI.powi(2));
    assert!((v["bound"].as_f64().unwrap() - expect).abs() < 1e-10);
    let rows = std::fs::read_to_string(&modes).unwrap();
    assert_eq!(rows.lines().count(), 3);
}

#[test]
fn rate_dry_run_prints_the_step_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("rate.toml");
    std::fs::write(
        &cfg,
        "manifold = \"circle:c=1\"\nhorizons = [1.0, 2.0, 4.0, 8.0]\nreplicas = 8\ndt = 0.01\nn_ref = 50\nn_est = 50\n",
    )
    .unwrap();
    let out = occkde(&["rate", "--config", cfg.to_str().unwrap(), "--dry-run"]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("12000 Euler steps"), "{err}");
    assert!(out.stdout.is_empty());

    let csv = dir.path().join("rows.csv");
    let summary = dir.path().join("summary.json");
    occkde(&["rate", "--config", cfg.to_str().unwrap(), "--csv", csv.to_str().unwrap(), "--json", summary.to_str().unwrap()]);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 1 + 32);
    let s = json_file(&summary);
    assert_eq!(s["schema_version"], 1);
    assert!(s["fits"][0]["slope_raw"].is_number());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("rate.toml");
    std::fs::write(&cfg, "manifold = \"circle:c=1\"\nreplica = 8\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_occkde")).args(["rate", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn kernel_check_and_small_diagnostics() {
    let out = occkde(&["kernel-check", "--kernel", "poly:r=4", "--dims", "2,3"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for d in v["dims"].as_array().unwrap() {
        assert!(d["max_deviation"].as_f64().unwrap() < 1e-9);
    }
    let dir = tempfile::tempdir().unwrap();
    let kl = dir.path().join("kl.toml");
    std::fs::write(&kl, "p = \"uniform\"\nq = \"uniform\"\nhorizon = 1.0\npaths = 4\n").unwrap();
    let out = occkde(&["kl-check", "--config", kl.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["mc_mean"], 0.0);
    let mm = dir.path().join("mm.toml");
    std::fs::write(&mm, "epsilons = [0.1, 0.2]\ngrid = 512\npairs = 2\n").unwrap();
    let out = occkde(&["minimax", "--config", mm.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["w1_doubling_ratio"].as_f64().unwrap() - 2.0).abs() < 0.2);
}
