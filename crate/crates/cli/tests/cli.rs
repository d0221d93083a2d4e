//! End-to-end tests of the `air` binary: artifact layout, determinism, exit
//! codes, and the sweep conventions.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use air_cli::config::{ExperimentConfig, SweepSpec};

fn air() -> Command {
    Command::new(env!("CARGO_BIN_EXE_air"))
}

fn tmpdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("air_cli_{}_{name}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn smoke_config(iters: usize, seed: u64) -> String {
    format!(
        r#"{{
  "dataset": {{"synthetic": {{"n": 600, "d": 16, "clusters": 4, "seed": 9}}}},
  "encoder_arch": "d12-z3",
  "decoder_arch": "d12-x16",
  "objective": {{"kind": "vae"}},
  "train": {{"lr0": 0.002, "iters": {iters}, "batch_size": 32, "eval_every": 100, "eval_k": 16, "seed": {seed}}},
  "svi": {{"ell": 4, "k_final": 32, "steps": 40}}
}}"#
    )
}

fn write(path: &Path, content: &str) {
    std::fs::write(path, content).unwrap();
}

#[test]
fn train_smoke_writes_artifacts_quickly() {
    let dir = tmpdir("train_smoke");
    let cfg = dir.join("cfg.json");
    write(&cfg, &smoke_config(500, 11));
    let started = Instant::now();
    let out = air().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&dir).output().unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(started.elapsed().as_secs() < 60, "smoke train too slow");
    for artifact in ["history.csv", "model.airm", "resolved-config.json"] {
        assert!(dir.join(artifact).exists(), "missing {artifact}");
    }
    let history = std::fs::read_to_string(dir.join("history.csv")).unwrap();
    assert!(history.starts_with("# seed=11 config_hash="));
    assert!(history.lines().nth(1).unwrap().starts_with("iter,train_loss,val_bound"));
}

#[test]
fn train_rerun_is_bit_identical() {
    let dir_a = tmpdir("rerun_a");
    let dir_b = tmpdir("rerun_b");
    let cfg = dir_a.join("cfg.json");
    write(&cfg, &smoke_config(200, 21));
    for dir in [&dir_a, &dir_b] {
        let out = air().args(["train", "--config"]).arg(&cfg).arg("--out").arg(dir).output().unwrap();
        assert!(out.status.success());
    }
    assert_eq!(
        std::fs::read(dir_a.join("history.csv")).unwrap(),
        std::fs::read(dir_b.join("history.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(dir_a.join("model.airm")).unwrap(),
        std::fs::read(dir_b.join("model.airm")).unwrap()
    );
}

#[test]
fn missing_dataset_path_exits_2() {
    let dir = tmpdir("missing_data");
    let cfg = dir.join("cfg.json");
    write(
        &cfg,
        r#"{
  "dataset": {"idx": {"train_images": "/nonexistent/train.idx", "test_images": "/nonexistent/t10k.idx", "n_train": 10, "n_val": 5}},
  "encoder_arch": "d8-z2",
  "decoder_arch": "d8-x16",
  "objective": {"kind": "vae"},
  "train": {"lr0": 0.001, "iters": 10, "batch_size": 4, "seed": 1}
}"#,
    );
    let out = air().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&dir).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tmpdir("unknown_key");
    let cfg = dir.join("cfg.json");
    let text = smoke_config(10, 1).replace("\"lr0\"", "\"learning_rate_typo\"");
    write(&cfg, &text);
    let out = air().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&dir).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergent_training_exits_3_with_partial_outputs() {
    let dir = tmpdir("diverge");
    let cfg = dir.join("cfg.json");
    write(&cfg, &smoke_config(2000, 31).replace("\"lr0\": 0.002", "\"lr0\": 1e80"));
    let out = air().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&dir).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("history.csv").exists());
    assert!(dir.join("model.airm").exists());
}

#[test]
fn eval_identity_and_determinism() {
    let dir = tmpdir("eval");
    let cfg = dir.join("cfg.json");
    write(&cfg, &smoke_config(300, 41));
    assert!(air().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&dir).output().unwrap().status.success());

    let run_eval = |out_dir: &Path, seed: &str| {
        let st = air()
            .arg("eval")
            .arg(dir.join("model.airm"))
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(out_dir)
            .args(["--seed", seed])
            .output()
            .unwrap();
        assert!(st.status.success(), "stderr: {}", String::from_utf8_lossy(&st.stderr));
        std::fs::read_to_string(out_dir.join("gap_report.csv")).unwrap()
    };
    let a = run_eval(&tmpdir("eval_a"), "7");
    let b = run_eval(&tmpdir("eval_b"), "7");
    assert_eq!(a, b, "same seed must reproduce the report");
    let c = run_eval(&tmpdir("eval_c"), "8");
    assert_ne!(a, c);

    // delta_am = delta_infer − delta_ap exactly, from the emitted row
    let row = a.lines().nth(2).unwrap();
    let cols: Vec<&str> = row.split(',').collect();
    let (d_inf, d_ap, d_am): (f64, f64, f64) =
        (cols[2].parse().unwrap(), cols[3].parse().unwrap(), cols[4].parse().unwrap());
    assert_eq!(d_am.to_bits(), (d_inf - d_ap).to_bits());
}

#[test]
fn sweep_child_conversions_follow_the_conventions() {
    let base: ExperimentConfig = serde_json::from_str(&smoke_config(10, 1)).unwrap();
    // σ·√d axis: value 5.0 at d = 784 resolves to σ = 5/28
    let mut spec: SweepSpec = serde_json::from_value(serde_json::json!({
        "axis": "sigma_sqrt_d",
        "values": [5.0],
        "k": [1],
        "base": serde_json::from_str::<serde_json::Value>(&smoke_config(10, 1)).unwrap(),
    }))
    .unwrap();
    match &mut spec.base.dataset {
        air_cli::config::DatasetSpec::Synthetic(s) => {
            s.d = 784;
        }
        _ => unreachable!(),
    }
    spec.base.decoder_arch = "d12-x784".into();
    let child = spec.child(5.0, 1).unwrap();
    assert!((child.objective.sigma - 5.0 / 28.0).abs() < 1e-12);
    assert!((child.objective.sigma - 0.17857).abs() < 1e-4);
    assert_eq!(child.objective.kind, air_core::objective::ObjectiveKind::Dvae);

    // 10/H axis: 0 means weight normalization off, 2.5 means H = 4
    let spec: SweepSpec = serde_json::from_value(serde_json::json!({
        "axis": "ten_over_H",
        "values": [0.0, 2.5],
        "k": [4],
        "base": serde_json::from_str::<serde_json::Value>(&smoke_config(10, 1)).unwrap(),
    }))
    .unwrap();
    let off = spec.child(0.0, 4).unwrap();
    assert_eq!(off.objective.weight_norm_h, None);
    assert_eq!(off.objective.kind, air_core::objective::ObjectiveKind::Iwae);
    let on = spec.child(2.5, 4).unwrap();
    assert_eq!(on.objective.weight_norm_h, Some(4.0));
    let _ = base;
}

#[test]
fn sweep_runs_children_and_zeroes_the_baseline() {
    let dir = tmpdir("sweep");
    let sweep_path = dir.join("sweep.json");
    let base: serde_json::Value = serde_json::from_str(&smoke_config(150, 51)).unwrap();
    let spec = serde_json::json!({
        "axis": "sigma_sqrt_d",
        "values": [0.0, 4.0],
        "k": [1],
        "base": base,
    });
    write(&sweep_path, &serde_json::to_string_pretty(&spec).unwrap());
    let out = air()
        .args(["sweep", "--config"])
        .arg(&sweep_path)
        .arg("--out")
        .arg(&dir)
        .args(["--jobs", "2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let sweep_csv = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = sweep_csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 2, "one row per (value, k): {sweep_csv}");
    assert!(rows.iter().all(|r| r.ends_with(",ok")), "{sweep_csv}");

    let curve = std::fs::read_to_string(dir.join("curve_k1.tsv")).unwrap();
    let baseline_row = curve.lines().skip(2).find(|l| l.starts_with("0\t")).unwrap();
    let delta: f64 = baseline_row.split('\t').nth(1).unwrap().parse().unwrap();
    assert_eq!(delta, 0.0, "baseline subtraction must leave exactly zero");

    // degenerate single cell ≡ standalone train + eval with the derived child
    let child_dir = dir.join("v0_k1");
    assert!(child_dir.join("gap_report.csv").exists());
    let standalone = tmpdir("sweep_standalone");
    let child_cfg = child_dir.join("config.json");
    assert!(air()
        .args(["train", "--config"])
        .arg(&child_cfg)
        .arg("--out")
        .arg(&standalone)
        .output()
        .unwrap()
        .status
        .success());
    assert_eq!(
        std::fs::read(child_dir.join("model.airm")).unwrap(),
        std::fs::read(standalone.join("model.airm")).unwrap(),
        "sweep child must equal a standalone run of its resolved config"
    );
}

#[test]
fn sweep_records_failed_children_and_continues() {
    let dir = tmpdir("sweep_fail");
    let sweep_path = dir.join("sweep.json");
    // absurd learning rate: every child diverges, the sweep still completes
    let base: serde_json::Value =
        serde_json::from_str(&smoke_config(400, 61).replace("\"lr0\": 0.002", "\"lr0\": 1e80"))
            .unwrap();
    let spec = serde_json::json!({
        "axis": "sigma_sqrt_d",
        "values": [0.0],
        "k": [1],
        "base": base,
    });
    write(&sweep_path, &serde_json::to_string_pretty(&spec).unwrap());
    let out = air()
        .args(["sweep", "--config"])
        .arg(&sweep_path)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "sweep must survive child failures");
    let sweep_csv = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    assert!(
        sweep_csv.lines().skip(2).all(|r| r.ends_with(",failed")),
        "expected failed rows: {sweep_csv}"
    );
}

#[test]
fn verify_exit_codes() {
    let dir = tmpdir("verify");
    let started = Instant::now();
    let ok = air().args(["verify", "--out"]).arg(&dir).output().unwrap();
    assert_eq!(ok.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&ok.stderr));
    assert!(started.elapsed().as_secs() < 300, "default verify suite exceeded 5 minutes");
    let tsv = std::fs::read_to_string(dir.join("verify.tsv")).unwrap();
    assert!(tsv.lines().nth(1).unwrap().starts_with("check_name\tstatus"));
    assert!(tsv.contains("PASS"));

    // an impossible override must flip the exit code to 1
    let fail = air()
        .args(["verify", "--out"])
        .arg(&dir)
        .args(["--mc-draws", "1000", "--bound-samples", "10000"])
        .args(["--tol", "lemma1_weights_sum_to_one=-1"])
        .output()
        .unwrap();
    assert_eq!(fail.status.code(), Some(1));
}
