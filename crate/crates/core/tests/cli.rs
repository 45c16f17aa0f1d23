use std::path::Path;
use std::process::{Command, Output};

use interpdn_core::checkpoint::Checkpoint;
use interpdn_core::cli::{resolve_config, ConfigArgs};

fn interpdn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_interpdn"))
        .args(args)
        .args(["--log", "warn"])
        .env("INTERPDN_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_tiny(out: &Path, epochs: &str) -> Output {
    let o = interpdn(&["train", "--preset", "tiny", "--max-epochs", epochs, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    o
}

#[test]
fn support_set_csv() {
    let o = interpdn(&["support-set", "--s", "25", "--b", "4", "--flavor", "equal_probability"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("index,point,cell_mass"));
    let masses: Vec<f64> = lines.map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(masses.len(), 25);
    let (lo, hi) = masses.iter().fold((f64::MAX, f64::MIN), |(a, b), &m| (a.min(m), b.max(m)));
    assert!(hi - lo < 1e-9);

    let o = interpdn(&["support-set", "--s", "4", "--b", "4", "--flavor", "uniform"]);
    let points: Vec<String> = stdout(&o).lines().skip(1).map(|l| l.split(',').nth(1).unwrap().to_string()).collect();
    assert_eq!(points, ["-3", "-1", "1", "3"]);

    let o = interpdn(&["support-set", "--s", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn preset_resolution() {
    let cfg = resolve_config(&ConfigArgs {
        config: None,
        preset: Some("etth1_96".into()),
        seed: None,
        max_epochs: None,
    })
    .unwrap();
    assert_eq!(cfg.model.lookback, 512);
    assert_eq!(cfg.training.initial_lr, 0.0001);
    assert_eq!(cfg.training.batch_size, 1024);
    assert_eq!((cfg.loss.alpha, cfg.loss.beta, cfg.loss.gamma), (0.05, 0.05, 0.1));
}

#[test]
fn config_errors_exit_1_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "preset = \"tiny\"\n[training]\npatience = 0\n").unwrap();
    let out = dir.path().join("o");
    let o = interpdn(&["train", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("training.patience"), "{}", stderr(&o));

    std::fs::write(&path, "preset = \"tiny\"\n[model]\nlookbak = 3\n").unwrap();
    let o = interpdn(&["train", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lookbak"), "{}", stderr(&o));

    let o = interpdn(&["ablate", "--mode", "nope", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fourbsp"), "{}", stderr(&o));
}

#[test]
fn missing_data_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.csv");
    let o = interpdn(&[
        "train",
        "--preset",
        "etth1_96",
        "--data",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere.csv"), "{}", stderr(&o));
}

#[test]
fn divergent_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "preset = \"tiny\"\n[training]\ninitial_lr = 1e38\nmax_epochs = 3\n").unwrap();
    let o = interpdn(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn train_is_deterministic_and_eval_is_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_tiny(&a, "4");
    train_tiny(&b, "4");
    let ca = std::fs::read(a.join("checkpoint.ipdn")).unwrap();
    assert_eq!(ca, std::fs::read(b.join("checkpoint.ipdn")).unwrap());
    assert_eq!(
        std::fs::read(a.join("loss_curve.csv")).unwrap(),
        std::fs::read(b.join("loss_curve.csv")).unwrap()
    );
    let curve = std::fs::read_to_string(a.join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("epoch,L_p,L_f,L_c,L_t,total,split"));
    assert_eq!(curve.lines().count(), 1 + 2 * 4);
    let snapshot = std::fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(snapshot.contains("[dataset]") && snapshot.contains("max_epochs = 4"));

    let ck = Checkpoint::load(a.join("checkpoint.ipdn")).unwrap();
    let ckpt = a.join("checkpoint.ipdn");
    let ev = dir.path().join("eval");
    let o = interpdn(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--split",
        "val",
        "--out",
        ev.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let total = summary["total"].as_f64().unwrap();
    assert!((total - ck.manifest.best_val_loss).abs() <= 1e-6);
    let val_windows = summary["windows"].as_u64().unwrap() as usize;
    let rows = std::fs::read_to_string(ev.join("predictions.csv")).unwrap().lines().count() - 1;
    assert_eq!(rows, val_windows * 8);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["mode"], "full");

    let o = interpdn(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--split", "test"]);
    let test: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let test_windows = test["windows"].as_u64().unwrap() as usize;
    assert_eq!(val_windows, 400 - 8 + 1);
    assert_eq!(test_windows, 800 - 8 + 1);

    let o = interpdn(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--preset", "etth1_96"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablate_labels_mode_and_forecast_writes_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sbsp");
    let o = interpdn(&["ablate", "--mode", "sbsp", "--preset", "tiny", "--max-epochs", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["mode"], "sbsp");
    assert!(report["crps"].is_null());

    let full = dir.path().join("full");
    train_tiny(&full, "2");
    let prep = dir.path().join("prep");
    let o = interpdn(&["prepare", "--preset", "tiny", "--out", prep.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let series = prep.join("series.csv");
    let fc = dir.path().join("fc.csv");
    let o = interpdn(&[
        "forecast",
        "--checkpoint",
        full.join("checkpoint.ipdn").to_str().unwrap(),
        "--data",
        series.to_str().unwrap(),
        "--out",
        fc.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&fc).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("step,channel,prediction,q0.1"));
    assert_eq!(text.lines().count(), 1 + 8);
}

#[test]
fn gradcheck_command_passes() {
    let o = interpdn(&["gradcheck", "--windows", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(r["max_rel_error"].as_f64().unwrap() < 1e-4);
}
