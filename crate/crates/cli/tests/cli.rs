use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn riskeig(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riskeig"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn solve_ou_writes_eigenpair_below_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let out = riskeig(&["solve", "--model", "ou_quadratic", "--r", "8", "--h", "0.01", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let res = read_json(&dir.path().join("result.json"));
    let lambda = res["lambda"].as_f64().unwrap();
    assert!(lambda > 0.24 && lambda < 0.25, "{lambda}");
    assert!(res["residual"].as_f64().unwrap() < 1e-10);
    assert!(res["hjb_residual"].as_f64().unwrap() < 1e-10);
    assert_eq!(res["v"].as_array().unwrap().len(), res["nodes"].as_u64().unwrap() as usize);
    assert!(dir.path().join("manifest.json").exists());
    assert!(dir.path().join("fields/solution.csv").exists());
}

#[test]
fn usage_errors_exit_two_with_json() {
    let out = riskeig(&["solve"]);
    assert_eq!(code(&out), 2);
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["exit_code"], 2);

    let out = riskeig(&["solve", "--model", "ou_quadratic", "--h", "0"]);
    assert_eq!(code(&out), 2);
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"]["message"].as_str().unwrap().contains("spacing"));

    assert_eq!(code(&riskeig(&["frobnicate"])), 2);
    assert_eq!(code(&riskeig(&["solve", "--model", "no_such_model"])), 2);
    assert_eq!(code(&riskeig(&["verify", "--model", "ou_quadratic", "--suite", "nope", "--r", "2", "--h", "0.1"])), 2);
}

#[test]
fn unwritable_output_is_infrastructure_failure() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let target = blocker.join("sub");
    let out = riskeig(&["solve", "--model", "ou_quadratic", "--r", "2", "--h", "0.1", "--out", target.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
}

#[test]
fn sweep_double_well_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let out = riskeig(&["sweep", "--model", "double_well", "--radii", "2,4,8", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let res = read_json(&dir.path().join("result.json"));
    assert_eq!(res["monotone"], true);
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lambdas: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(lambdas.len(), 3);
    assert!(lambdas.windows(2).all(|w| w[1] >= w[0]), "{lambdas:?}");
}

#[test]
fn certify_reports_classification_and_fields() {
    let dir = tempfile::tempdir().unwrap();
    let out = riskeig(&["certify", "--model", "ou_quadratic", "--radii", "2,4,6", "--h", "0.02", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let res = read_json(&dir.path().join("result.json"));
    assert_eq!(res["classification"], "geometric-certified");
    let header = std::fs::read_to_string(dir.path().join("fields/ground_state.csv")).unwrap();
    assert!(header.starts_with("x1,v,psi,grad_psi1,twisted_drift1,lyapunov"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    std::fs::write(&cfg, r#"{"model":"double_well","grid":{"radii":[1,2],"spacing":0.1},"sim":{"seed":7}}"#).unwrap();
    let out_dir = dir.path().join("out");
    let out = riskeig(&["sweep", "--config", cfg.to_str().unwrap(), "--h", "0.05", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = read_json(&out_dir.join("manifest.json"));
    assert_eq!(manifest["config"]["grid"]["spacing"].as_f64(), Some(0.05));
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);

    std::fs::write(&cfg, r#"{"model":"double_well","unknown":1}"#).unwrap();
    assert_eq!(code(&riskeig(&["sweep", "--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn deterministic_suite_passes_on_small_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = riskeig(&[
        "verify", "--model", "ou_quadratic", "--suite", "deterministic", "--radii", "2,4,6,8", "--h", "0.02", "--out",
        dir.path().to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(code(&out), 0, "{stdout}");
    let res = read_json(&dir.path().join("result.json"));
    assert_eq!(res["passed"], true);
    assert!(res["checks"].as_array().unwrap().len() >= 6);
}

#[test]
fn failing_check_exits_one() {
    // a single radius cannot pass the strict probe on a flat cost
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("flat.json");
    std::fs::write(
        &cfg,
        r#"{"model":{"dim":1,"drift":{"family":"zero"},"cost":{"family":"zero"}},"grid":{"radii":[1,2],"spacing":0.05},"probes":{"bump_epsilon":0.0}}"#,
    )
    .unwrap();
    let out = riskeig(&["verify", "--config", cfg.to_str().unwrap(), "--suite", "probe", "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stdout));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "checks_failed");
}

#[test]
fn monte_carlo_output_is_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: &str, name: &str| {
        let p = dir.path().join(name);
        let out = riskeig(&[
            "verify", "--model", "ou_quadratic", "--suite", "exit", "--radii", "4", "--h", "0.02", "--paths", "300", "--dt", "0.005",
            "--threads", threads, "--out", p.to_str().unwrap(),
        ]);
        assert!(matches!(code(&out), 0 | 1), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(p.join("result.json")).unwrap()
    };
    let a = run("1", "a");
    let b = run("1", "b");
    let c = run("3", "c");
    assert_eq!(a, b);
    assert_eq!(a, c);
}
