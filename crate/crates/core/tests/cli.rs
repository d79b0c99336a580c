//! End-to-end runs of the `aart` binary on a tiny dataset.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn aart(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aart"))
        .args(["--threads", "1", "--out-dir", dir.to_str().unwrap()])
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

const SMALL: &[&str] = &[
    "--num-videos", "60", "--num-classes", "5", "--video-dim", "6", "--audio-dim", "3",
    "--min-frames", "4", "--max-frames", "8",
];

const FAST: &[&str] = &["--max-iterations", "6", "--eval-every", "3", "--batch-size", "8", "--model-dim", "8", "--num-heads", "2"];

fn synth(dir: &Path) -> String {
    let mut args = vec!["synth", "--out", "d.avd"];
    args.extend_from_slice(SMALL);
    ok(&aart(dir, &args));
    dir.join("d.avd").to_str().unwrap().to_string()
}

fn train(dir: &Path, data: &str, regime: &str) -> String {
    let mut args = vec!["train", "--data", data, "--regime", regime];
    args.extend_from_slice(FAST);
    ok(&aart(dir, &args));
    dir.join(format!("{regime}.aat")).to_str().unwrap().to_string()
}

#[test]
fn synth_is_deterministic_and_seeded() {
    let d = tempfile::tempdir().unwrap();
    let mut args = vec!["--seed", "4", "synth", "--out", "a.avd", "--jsonl", "a.jsonl"];
    args.extend_from_slice(SMALL);
    ok(&aart(d.path(), &args));
    args[4] = "b.avd";
    args[6] = "b.jsonl";
    ok(&aart(d.path(), &args));
    let a = fs::read(d.path().join("a.avd")).unwrap();
    assert_eq!(a, fs::read(d.path().join("b.avd")).unwrap());
    assert_eq!(&a[..4], b"AVD1");
    let lines = fs::read_to_string(d.path().join("a.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 60);
    serde_json::from_str::<serde_json::Value>(lines.lines().next().unwrap()).unwrap();

    args[1] = "5";
    args[4] = "c.avd";
    ok(&aart(d.path(), &args));
    assert_ne!(a, fs::read(d.path().join("c.avd")).unwrap());
}

#[test]
fn usage_and_config_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(aart(d.path(), &["synth"]).status.code(), Some(2));
    assert_eq!(aart(d.path(), &["frobnicate"]).status.code(), Some(2));
    let data = synth(d.path());
    let bad = aart(d.path(), &["train", "--data", &data, "--regime", "sometimes"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("sometimes"));
    assert_eq!(aart(d.path(), &["train", "--data", &data, "--lr", "-1"]).status.code(), Some(2));
    let cfg = d.path().join("bad.cfg");
    fs::write(&cfg, "no_such_key = 3\n").unwrap();
    let out = aart(d.path(), &["train", "--data", &data, "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(aart(d.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_1() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("missing.avd");
    let out = aart(d.path(), &["train", "--data", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    fs::write(d.path().join("junk.aat"), b"nope").unwrap();
    let data = synth(d.path());
    let junk = d.path().join("junk.aat");
    let out = aart(d.path(), &["eval", "--checkpoint", junk.to_str().unwrap(), "--data", &data]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_eval_attack_robustness_plot() {
    let d = tempfile::tempdir().unwrap();
    let data = synth(d.path());
    let ckpt = train(d.path(), &data, "a_art");
    for f in ["a_art.aat", "a_art_report.csv", "a_art_losses.csv", "a_art_manifest.json"] {
        assert!(d.path().join(f).is_file(), "{f}");
    }
    let losses = fs::read_to_string(d.path().join("a_art_losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 7);
    aart::manifest::ExperimentManifest::load(&d.path().join("a_art_manifest.json")).unwrap();

    let clean = ok(&aart(d.path(), &["eval", "--checkpoint", &ckpt, "--data", &data]));
    let zero = ok(&aart(d.path(), &["eval", "--checkpoint", &ckpt, "--data", &data, "--adversarial", "0"]));
    assert_eq!(clean, zero);
    let row: Vec<&str> = clean.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "test");
    let gap: f64 = row[2].parse().unwrap();
    assert!((0.0..=1.0).contains(&gap));

    ok(&aart(d.path(), &["attack", "--checkpoint", &ckpt, "--data", &data, "--epsilon", "0.5"]));
    let adv = aart::data::read_dataset(&d.path().join("adversarial.avd")).unwrap();
    assert_eq!(adv.len(), 6);
    let mse = fs::read_to_string(d.path().join("attention_mse.csv")).unwrap();
    assert_eq!(mse.lines().count(), 7);

    ok(&aart(d.path(), &["robustness", "--checkpoint", &ckpt, "--data", &data]));
    let csv = fs::read_to_string(d.path().join("robustness.csv")).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("robustness_summary.json")).unwrap()).unwrap();
    let fooled = summary["fooled_fraction"].as_f64().unwrap();
    assert_eq!(csv.lines().count() - 1, (fooled * 6.0).round() as usize);
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(3) == Some("true")));

    let id = adv.examples[0].id.clone();
    ok(&aart(d.path(), &["plot-attention", "--checkpoint", &ckpt, "--data", &data, "--video-id", &id, "--out", "p"]));
    let svg = fs::read_to_string(d.path().join("p.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<polyline").count(), 2);
    let csv = fs::read_to_string(d.path().join("p.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("frame,clean,adversarial"));
    let missing = aart(d.path(), &["plot-attention", "--checkpoint", &ckpt, "--data", &data, "--video-id", "nope"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let d = tempfile::tempdir().unwrap();
    let data = synth(d.path());
    let cfg = d.path().join("t.cfg");
    fs::write(&cfg, "regime = art\nmax_iterations = 50\nbatch_size = 8\nmodel_dim = 8\nnum_heads = 2\n").unwrap();
    ok(&aart(d.path(), &["train", "--data", &data, "--config", cfg.to_str().unwrap(), "--max-iterations", "2"]));
    let losses = fs::read_to_string(d.path().join("art_losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 3);
}

#[test]
fn sweep_with_one_grid_point() {
    let d = tempfile::tempdir().unwrap();
    let data = synth(d.path());
    let mut args = vec!["sweep", "--data", &data, "--param", "alpha", "--grid", "2"];
    args.extend_from_slice(FAST);
    ok(&aart(d.path(), &args));
    let csv = fs::read_to_string(d.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("alpha,2,") && rows[1].ends_with(",ok"));
    assert!(fs::read_to_string(d.path().join("sweep.svg")).unwrap().contains("<polyline"));
}

#[test]
fn training_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let data = synth(d.path());
    let a = fs::read(train(d.path(), &data, "art")).unwrap();
    let report = fs::read(d.path().join("art_report.csv")).unwrap();
    let b = fs::read(train(d.path(), &data, "art")).unwrap();
    assert_eq!(a, b);
    assert_eq!(report, fs::read(d.path().join("art_report.csv")).unwrap());
}
