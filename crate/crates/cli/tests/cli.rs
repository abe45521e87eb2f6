use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn tsvr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsvr"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn tsvr")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Writes a tiny dataset and a config pointing at it.
fn setup(dir: &Path, extra: &str) -> PathBuf {
    let spec = dir.join("spec.json");
    fs::write(
        &spec,
        r#"{"num_source_classes": 6, "num_target_classes": 3, "feature_dim": 8,
            "attribute_dim": 4, "samples_per_class": 20, "seed": 11}"#,
    )
    .unwrap();
    let out = tsvr(&["synth", "--spec", "spec.json", "--out", "data"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = dir.join("cfg.json");
    fs::write(
        &cfg,
        format!(
            r#"{{"manifest": "data/manifest.json", "output_dir": "run", "max_iterations": 30,
                "batch_size": 8, "encoder_hidden": 8, "metric_hidden": 8, "log_every": 0{extra}}}"#
        ),
    )
    .unwrap();
    cfg
}

fn read_json(p: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn synth_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = tsvr(&["synth", "--out", name, "--seed", "5"], dir.path());
        assert_eq!(code(&out), 0);
    }
    for block in ["source_features", "source_labels", "target_features", "target_attributes"] {
        let a = fs::read(dir.path().join(format!("a/{block}.mtxb"))).unwrap();
        let b = fs::read(dir.path().join(format!("b/{block}.mtxb"))).unwrap();
        assert_eq!(a, b, "{block}");
    }
    let out = tsvr(&["synth", "--out", "c", "--seed", "6"], dir.path());
    assert_eq!(code(&out), 0);
    assert_ne!(
        fs::read(dir.path().join("a/source_features.mtxb")).unwrap(),
        fs::read(dir.path().join("c/source_features.mtxb")).unwrap()
    );
}

#[test]
fn synth_csv_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let out = tsvr(&["synth", "--out", "d", "--format", "csv"], dir.path());
    assert_eq!(code(&out), 0);
    let ds = tsvr_core::load_dataset(dir.path().join("d/manifest.json")).unwrap();
    assert_eq!(ds.num_target_classes(), 10);
}

#[test]
fn empty_target_split_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.json"), r#"{"num_target_classes": 0}"#).unwrap();
    let out = tsvr(&["synth", "--spec", "s.json", "--out", "x"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn train_writes_one_loss_row_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "");
    let out = tsvr(&["train", "--config", "cfg.json", "--override", "max_iterations=10"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("run/losses.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iter,pre,ent,rec,align,total");
    assert_eq!(lines.len(), 11);
    assert!(lines[10].starts_with("10,"));
    // dsbn has no alignment term
    assert_eq!(lines[1].split(',').nth(4), Some(""));
    let summary = read_json(dir.path().join("run/summary.json"));
    assert_eq!(summary["iterations"], 10);
    assert!(dir.path().join("run/model.ckpt").exists());
}

#[test]
fn summary_echoes_default_hyperparameters() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bare.json"), r#"{"manifest": "data/manifest.json", "max_iterations": 2}"#).unwrap();
    setup(dir.path(), "");
    let out = tsvr(&["train", "--config", "bare.json", "--override", "encoder_hidden=4", "--override", "metric_hidden=4"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = &read_json(dir.path().join("run/summary.json"))["config"];
    assert_eq!(cfg["learning_rate"].as_f64(), Some(1e-5));
    assert_eq!(cfg["batch_size"], 32);
    assert_eq!(cfg["lambda_rec"].as_f64(), Some(1e-5));
    assert_eq!(cfg["lambda_ent"].as_f64(), Some(1e-9));
    assert_eq!(cfg["bn_momentum"].as_f64(), Some(0.9));
    assert_eq!(cfg["alignment_mode"], "dsbn");
    assert_eq!(cfg["label_propagation"]["k"], 10);
}

#[test]
fn mmd_rows_carry_the_alignment_term() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), r#", "alignment_mode": "mmd""#);
    let out = tsvr(&["train", "--config", "cfg.json", "--override", "max_iterations=3"], dir.path());
    assert_eq!(code(&out), 0);
    let csv = fs::read_to_string(dir.path().join("run/losses.csv")).unwrap();
    let align = csv.lines().nth(1).unwrap().split(',').nth(4).unwrap().to_string();
    assert!(align.parse::<f64>().unwrap() >= 0.0);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "");
    let d = dir.path();
    assert_eq!(code(&tsvr(&["train", "--config", "cfg.json", "--override", "output_dir=\"full\""], d)), 0);
    assert_eq!(
        code(&tsvr(&["train", "--config", "cfg.json", "--override", "output_dir=\"half\"", "--override", "max_iterations=12"], d)),
        0
    );
    let out = tsvr(
        &["train", "--config", "cfg.json", "--override", "output_dir=\"rest\"", "--resume", "half/model.ckpt"],
        d,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(d.join("full/model.ckpt")).unwrap(), fs::read(d.join("rest/model.ckpt")).unwrap());
}

#[test]
fn eval_without_label_propagation_has_no_refined_keys() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "");
    let d = dir.path();
    assert_eq!(code(&tsvr(&["train", "--config", "cfg.json"], d)), 0);
    let out = tsvr(&["eval", "--checkpoint", "run/model.ckpt", "--config", "cfg.json", "--no-label-prop", "--out", "plain"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m = read_json(d.join("plain/metrics.json"));
    assert!(m.get("mca_refined").is_none());
    assert!(m.get("per_class_refined").is_none());
    assert!(!d.join("plain/predictions_refined.csv").exists());
    let mca = m["mca"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mca));
    let per_class = m["per_class"].as_array().unwrap();
    assert_eq!(per_class.len(), 3);
    let mean = per_class.iter().map(|c| c["accuracy"].as_f64().unwrap()).sum::<f64>() / 3.0;
    assert!((mean - mca).abs() < 1e-12);

    let out = tsvr(&["eval", "--checkpoint", "run/model.ckpt", "--config", "cfg.json"], d);
    assert_eq!(code(&out), 0);
    let m = read_json(d.join("run/eval/metrics.json"));
    assert!(m["mca_refined"].is_number());
    assert_eq!(m["mca_raw"], m["mca"]);
    let preds = fs::read_to_string(d.join("run/eval/predictions.csv")).unwrap();
    assert_eq!(preds.lines().next(), Some("image_index,predicted_category,score"));
    assert_eq!(preds.lines().count(), 1 + 60);
}

#[test]
fn eval_rejects_a_mismatched_dataset() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "");
    let d = dir.path();
    assert_eq!(code(&tsvr(&["train", "--config", "cfg.json"], d)), 0);
    assert_eq!(code(&tsvr(&["synth", "--out", "other"], d)), 0);
    let out = tsvr(
        &["eval", "--checkpoint", "run/model.ckpt", "--config", "cfg.json", "--override", "manifest=\"other/manifest.json\""],
        d,
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn hidden_dump_has_one_row_per_image() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "");
    let d = dir.path();
    assert_eq!(code(&tsvr(&["train", "--config", "cfg.json"], d)), 0);
    let out = tsvr(&["eval", "--checkpoint", "run/model.ckpt", "--config", "cfg.json", "--dump-hidden", "hid"], d);
    assert_eq!(code(&out), 0);
    let h = tsvr_core::data::load_matrix_mtxb(d.join("hid/target_hidden2.mtxb")).unwrap();
    assert_eq!((h.rows(), h.cols()), (60, 8));
    let h = tsvr_core::data::load_matrix_mtxb(d.join("hid/source_hidden1.mtxb")).unwrap();
    assert_eq!(h.rows(), 120);
}

#[test]
fn bad_overrides_and_missing_files_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "");
    let d = dir.path();
    assert_eq!(code(&tsvr(&["train", "--config", "cfg.json", "--override", "lernrate=1"], d)), 2);
    assert_eq!(code(&tsvr(&["train", "--config", "missing.json"], d)), 2);
    assert_eq!(code(&tsvr(&["train", "--config", "cfg.json", "--override", "batch_size=0"], d)), 2);
    assert_eq!(code(&tsvr(&["eval", "--checkpoint", "nope.ckpt", "--config", "cfg.json"], d)), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "");
    let out = tsvr(&["train", "--config", "cfg.json", "--override", "learning_rate=1e300"], dir.path());
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("numeric abort"));
}

#[test]
fn gradcheck_fault_injection_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = tsvr(&["gradcheck", "--num-seeds", "1", "--inject-fault", "mmd_loss=1.01"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("mmd_loss"));
    let out = tsvr(&["gradcheck", "--num-seeds", "1"], dir.path());
    assert_eq!(code(&out), 0);
}

#[test]
fn ablate_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "");
    let out = tsvr(&["ablate", "--config", "cfg.json", "--modes", "dsbn,none", "--seeds", "2", "--out", "abl"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(dir.path().join("abl/ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "mode,mean_mca,std_mca,runs,failed");
    assert!(lines[1].starts_with("dsbn,") && lines[1].ends_with(",2,0"));
    assert!(lines[2].starts_with("none,"));
    let runs = fs::read_to_string(dir.path().join("abl/ablation_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 5);
    assert_eq!(code(&tsvr(&["ablate", "--config", "cfg.json", "--modes", "bogus"], dir.path())), 2);
}
