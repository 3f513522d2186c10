use std::path::Path;
use std::process::{Command, Output};

fn crackseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crackseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run crackseg")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let f = dir.join("sweep.toml");
    std::fs::write(&f, body).unwrap();
    f
}

const CONFIG: &str = r#"
p_values = [1, "inf"]
seed = 1

[dataset]
synthetic = { count = 12, seed = 2 }
split = "all"

[model]
width_divisor = 64

[train]
epochs = 1
batch_size = 4
"#;

#[test]
fn prepare_synthetic_then_validate_split() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = crackseg(&["prepare-data", "--synthetic", "--count", "20", "--out", path(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("labels.csv").is_file());
    assert!(data.join("crack_labels.csv").is_file());
    assert_eq!(std::fs::read_dir(data.join("images")).unwrap().count(), 20);
    assert_eq!(std::fs::read_dir(data.join("masks")).unwrap().count(), 10);

    let split_dir = tmp.path().join("split");
    let labels = data.join("crack_labels.csv");
    let out = crackseg(&[
        "prepare-data", "--root", path(&data), "--labels", path(&labels), "--out", path(&split_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let split: serde_json::Value = serde_json::from_slice(&std::fs::read(split_dir.join("split.json")).unwrap()).unwrap();
    assert_eq!(split["stats"]["total"], 20);
    assert_eq!(split["train"].as_array().unwrap().len(), 14);

    // strict policy without a labels file fails with exit code 1
    let out = crackseg(&["prepare-data", "--root", path(&data), "--out", path(&split_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("images/synthetic_0000000.png"));
}

#[test]
fn sweep_with_overrides_then_segment_and_panel() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let out_dir = tmp.path().join("runs");
    let out = crackseg(&["sweep", "--config", path(&cfg), "--out", path(&out_dir), "--p", "2,inf", "--seed", "5"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("L_2") && stdout.contains("L_inf"), "{stdout}");
    let resolved = std::fs::read_to_string(out_dir.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("seed = 5"), "{resolved}");

    let data = tmp.path().join("data");
    assert!(crackseg(&["prepare-data", "--synthetic", "--count", "2", "--out", path(&data)]).status.success());
    let image = data.join("images/synthetic_0000000.png");
    let ck2 = out_dir.join("runs/p-2/repeat-0/model.safetensors");
    let ck_inf = out_dir.join("runs/p-inf/repeat-0/model.safetensors");

    // p <= 4 needs an explicit polarity
    let masks = tmp.path().join("masks");
    let out = crackseg(&["segment", "--checkpoint", path(&ck2), "--image", path(&image), "--out", path(&masks)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("polarity"));
    let out = crackseg(&["segment", "--checkpoint", path(&ck_inf), "--image", path(&image), "--out", path(&masks)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sidecar: serde_json::Value =
        serde_json::from_slice(&std::fs::read(masks.join("synthetic_0000000_mask.json")).unwrap()).unwrap();
    assert_eq!(sidecar["p"], "inf");
    assert_eq!(sidecar["polarity"], "direct");
    let mask = image::open(masks.join("synthetic_0000000_mask.png")).unwrap().to_luma8();
    assert_eq!(mask.dimensions(), (300, 300));
    assert!(mask.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    if sidecar["gated"] == true {
        assert!(mask.pixels().all(|p| p.0[0] == 0));
    }

    let panel = tmp.path().join("panel");
    let out = crackseg(&[
        "panel", "--sweep-dir", path(&out_dir), "--p", "2,inf,9", "--image", path(&image), "--out", path(&panel),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("skipped p=9"), "{stdout}");
    assert_eq!(std::fs::read_dir(&panel).unwrap().count(), 3);

    let out = crackseg(&["evaluate", "--checkpoint", path(&ck_inf), "--config", path(&cfg), "--part", "test"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["accuracy"].as_f64().unwrap() >= 0.0);
}

#[test]
fn parallel_workers_match_sequential_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let seq = tmp.path().join("seq");
    let par = tmp.path().join("par");
    assert!(crackseg(&["sweep", "--config", path(&cfg), "--out", path(&seq)]).status.success());
    let out = crackseg(&["sweep", "--config", path(&cfg), "--out", path(&par), "--parallel", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let load = |d: &Path| -> serde_json::Value {
        serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap()
    };
    assert_eq!(load(&seq)["records"], load(&par)["records"]);
}

#[test]
fn config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &CONFIG.replace("[1, \"inf\"]", "[0.5]"));
    let out = crackseg(&["sweep", "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let missing = tmp.path().join("nope.toml");
    assert_eq!(crackseg(&["sweep", "--config", path(&missing)]).status.code(), Some(1));
    let cfg = write_config(tmp.path(), CONFIG);
    let out = crackseg(&["sweep", "--config", path(&cfg), "--p", "0"]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn partial_failure_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let body = CONFIG.replace("width_divisor = 64", "width_divisor = 1\npretrained_weights_path = \"missing.safetensors\"");
    let cfg = write_config(tmp.path(), &body);
    let out = crackseg(&["sweep", "--config", path(&cfg), "--out", path(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
