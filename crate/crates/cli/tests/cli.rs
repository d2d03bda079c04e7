use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_reshuffle"))
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_exits_2_with_diagnostic() {
    let out = bin()
        .args(["simulate", "--config", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error"), "stderr: {err}");
}

#[test]
fn malformed_config_exits_2_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    std::fs::write(
        &path,
        r#"{
            "problem": {"kind": "toy_diagonal"},
            "hyper": {"eta": 0.01, "k": 3, "b": 1},
            "policies": ["full_batch"],
            "epochs": 2,
            "seeds": [1],
            "bogus_key": 1
        }"#,
    )
    .unwrap();
    let out = bin()
        .args(["simulate", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus_key"), "stderr should name the key: {err}");
}

#[test]
fn enumerate_prints_eleven_thirds_for_both_methods() {
    let out = bin().arg("enumerate").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    let hits = text.matches("3.666666666667").count();
    assert!(hits >= 2, "expected 11/3 from both methods:\n{text}");
}

#[test]
fn simulate_with_b_equals_n_prints_identical_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    std::fs::write(
        &path,
        r#"{
            "problem": {"kind": "toy_diagonal"},
            "hyper": {"eta": 0.01, "k": 1, "b": 3},
            "policies": ["without_replacement", "shuffle_once", "full_batch"],
            "epochs": 10,
            "seeds": [7],
            "theta0": [1.0, 6.0]
        }"#,
    )
    .unwrap();
    let out = bin()
        .args(["simulate", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    let endpoints: Vec<&str> = text
        .lines()
        .filter_map(|l| l.split("final_theta=").nth(1))
        .collect();
    assert_eq!(endpoints.len(), 3);
    assert!(
        endpoints.iter().all(|e| *e == endpoints[0]),
        "endpoints differ:\n{text}"
    );
}

#[test]
fn experiment_writes_report_and_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(
        &cfg,
        r#"{
            "problem": {"kind": "toy_diagonal"},
            "hyper": {"eta": 0.01, "k": 3, "b": 1},
            "policies": ["without_replacement", "full_batch"],
            "epochs": 5,
            "seeds": [1, 2],
            "theta0": [1.0, 6.0]
        }"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = bin()
        .args(["experiment", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(out_dir.join("report.json")).unwrap();
    assert!(report.contains("config_hash"));
    let csv =
        std::fs::read_to_string(out_dir.join("trajectory_WithoutReplacement_1.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header, "step,epoch,theta_0,theta_1,loss");
    // 5 epochs x 3 steps + initial row.
    assert_eq!(csv.lines().count(), 1 + 16);
    // Determinism: re-running yields an identical report.
    let out2_dir = dir.path().join("out2");
    let out2 = bin()
        .args(["experiment", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out2_dir)
        .output()
        .unwrap();
    assert_eq!(out2.status.code(), Some(0));
    let report2 = std::fs::read_to_string(out2_dir.join("report.json")).unwrap();
    assert_eq!(report, report2);
}

#[test]
fn bias_subcommand_reports_small_residual_on_quadratics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(
        &cfg,
        r#"{
            "problem": {"kind": "quadratic_random",
                        "d": 3, "n": 5, "hess_fluct": 0.25, "seed": 4},
            "hyper": {"eta": 0.04, "k": 5, "b": 1},
            "policies": ["without_replacement"],
            "epochs": 1,
            "seeds": [1],
            "theta0": [0.2, -0.1, 0.3]
        }"#,
    )
    .unwrap();
    let out = bin()
        .args(["bias", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    let residual = doc["residual_norm"].as_f64().unwrap();
    let pred: Vec<f64> = doc["predicted_step"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let pred_norm = pred.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(
        residual < 0.05 * pred_norm,
        "residual {residual} vs step norm {pred_norm}"
    );
}

#[test]
fn validate_exits_zero() {
    let out = bin().arg("validate").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "validate output:\n{text}");
    assert!(text.contains("[PASS]"));
    assert!(!text.contains("[FAIL]"), "{text}");
}
