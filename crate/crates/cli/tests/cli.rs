use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: [&str; 4] = [
    "--set",
    "synth.n_panelists=2",
    "--set",
    "synth.lightings=[\"natural\"]",
];

fn skinmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skinmap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = skinmap(args);
    assert!(
        out.status.success(),
        "skinmap {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn manifest(dir: &Path, cmd: &str) -> Value {
    let text = std::fs::read_to_string(dir.join(format!("{cmd}.manifest.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn output_hash(m: &Value, role: &str) -> String {
    m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .find(|o| o["role"] == role)
        .unwrap()["sha256"]
        .as_str()
        .unwrap()
        .to_string()
}

fn synth(dir: &Path, seed: &str, extra: &[&str]) -> Value {
    let d = dir.to_str().unwrap();
    let mut args = vec!["synth", "--seed", seed, "--out", d];
    args.extend(SMALL);
    args.extend(extra);
    ok(&args);
    manifest(dir, "synth")
}

#[test]
fn synth_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(&tmp.path().join("a"), "7", &[]);
    let b = synth(&tmp.path().join("b"), "7", &[]);
    let c = synth(&tmp.path().join("c"), "8", &[]);
    assert_eq!(output_hash(&a, "dataset"), output_hash(&b, "dataset"));
    assert_ne!(output_hash(&a, "dataset"), output_hash(&c, "dataset"));
    assert_eq!(a["seed"], 7);
    assert_eq!(a["summary"]["records"], 2);
}

#[test]
fn manifest_records_config_and_input_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "version = 1\nseed = 3\n[synth]\nn_panelists = 2\nlightings = [\"white\"]\n").unwrap();
    let out = tmp.path().join("out");
    ok(&["synth", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let m = manifest(&out, "synth");
    assert_eq!(m["schema"], 1);
    assert_eq!(m["seed"], 3);
    let snapshot = m["config"].as_str().unwrap();
    assert!(snapshot.contains("n_panelists = 2"));
    let input = &m["inputs"][0];
    assert_eq!(input["role"], "config");
    let content = std::fs::read(&cfg).unwrap();
    let mut blob = format!("blob {}\0", content.len()).into_bytes();
    blob.extend(&content);
    use sha2::Digest;
    assert_eq!(input["sha256"], hex::encode(sha2::Sha256::digest(&blob)));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();
    assert_eq!(skinmap(&["eval", "--data", "x.skd", "--train-data", "y.skd"]).status.code(), Some(2));
    assert_eq!(skinmap(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(skinmap(&["synth", "--bogus-flag"]).status.code(), Some(2));
    assert_eq!(skinmap(&["synth", "--out", d, "--set", "train.nope=1"]).status.code(), Some(2));
    assert_eq!(skinmap(&["train", "--out", d, "--data", "/no/such/file.skd"]).status.code(), Some(2));
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\n").unwrap();
    let out = skinmap(&["synth", "--out", d, "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

#[test]
fn help_lists_every_subcommand() {
    let out = ok(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["synth", "filter", "anchors", "train", "predict", "eval", "loo-lighting", "ablation", "heatmap"] {
        assert!(text.contains(cmd), "missing {cmd} in help");
    }
}

#[test]
fn filter_selects_records() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let d = dir.to_str().unwrap();
    ok(&["synth", "--out", d, "--set", "synth.n_panelists=2", "--set", "synth.lightings=[\"natural\",\"white\"]"]);
    let data = dir.join("dataset.skd");
    ok(&["filter", "--out", d, "--data", data.to_str().unwrap(), "--lighting", "white"]);
    let m = manifest(dir, "filter");
    assert_eq!(m["summary"]["kept"], 2);
    assert_eq!(m["summary"]["of"], 4);
    ok(&["filter", "--out", d, "--data", data.to_str().unwrap(), "--panelist", "P000", "--invert", "--name", "rest.skd"]);
    assert_eq!(manifest(dir, "filter")["summary"]["kept"], 2);
}

#[test]
fn anchors_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let d = dir.to_str().unwrap();
    let quick = ["--set", "anchors.epochs=3", "--set", "anchors.train_pairs=32", "--set", "anchors.eval_pairs=8"];
    let mut args = vec!["anchors", "pairs", "--out", d, "--count", "4"];
    args.extend(quick);
    ok(&args);
    let mut args = vec!["anchors", "train", "--out", d];
    args.extend(quick);
    ok(&args);
    let model = dir.join("anchor_model.safetensors");
    let pairs = dir.join("pairs.json");
    let mut args = vec!["anchors", "eval", "--out", d, "--model", model.to_str().unwrap(), "--pairs", pairs.to_str().unwrap()];
    args.extend(quick);
    ok(&args);
    let rate = manifest(dir, "anchors-eval")["summary"]["mean_error_rate"].as_f64().unwrap();
    assert!(rate.is_finite() && rate >= 0.0);

    let recs: Value = serde_json::from_str(&std::fs::read_to_string(&pairs).unwrap()).unwrap();
    let lm = dir.join("landmarks.json");
    std::fs::write(&lm, recs[0]["landmarks"].to_string()).unwrap();
    ok(&["anchors", "predict", "--out", d, "--model", model.to_str().unwrap(), "--landmarks", lm.to_str().unwrap()]);
    assert_eq!(manifest(dir, "anchors-predict")["summary"]["anchors"], 37);
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_predict_eval_heatmap() {
    let tmp = tempfile::tempdir().unwrap();
    let dir: PathBuf = tmp.path().to_path_buf();
    let d = path(&dir);
    let tiny = [
        "--set",
        "model.profile=tiny",
        "--set",
        "train.epochs=1",
        "--set",
        "augment.enable_geometric=false",
    ];
    let mut args = vec!["synth", "--export-images", "--out", d];
    args.extend(SMALL);
    ok(&args);
    let data = dir.join("dataset.skd");

    let mut args = vec!["train", "--out", d, "--data", path(&data), "--val", path(&data)];
    args.extend(tiny);
    ok(&args);
    let m = manifest(&dir, "train");
    assert!(m["summary"]["final_loss"].as_f64().unwrap().is_finite());
    let ck = dir.join("checkpoint.safetensors");
    assert!(ck.is_file());

    ok(&["predict", "--out", d, "--checkpoint", path(&ck), "--data", path(&data)]);
    let preds: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("predictions.json")).unwrap()).unwrap();
    assert_eq!(preds["kind"], "tewl");
    assert_eq!(preds["records"].as_array().unwrap().len(), 2);
    assert_eq!(preds["records"][0]["anchors"].as_array().unwrap().len(), 37);

    ok(&["eval", "--out", d, "--checkpoint", path(&ck), "--data", path(&data), "--train-data", path(&data)]);
    let rep = &manifest(&dir, "eval")["summary"];
    assert_eq!(rep["n"], 74);
    assert!(rep["mae_all"].as_f64().unwrap() >= 0.0);

    let img = dir.join("images").join("record-0001.png");
    let pr = dir.join("predictions.json");
    let hm = ["heatmap", "--out", d, "--predictions", path(&pr), "--image", path(&img), "--record", "1"];
    ok(&hm);
    let first = output_hash(&manifest(&dir, "heatmap"), "heatmap");
    let png = image::open(dir.join("heatmap.png")).unwrap().to_rgb8();
    assert_eq!(png.dimensions(), (980, 840 + 24));
    ok(&hm);
    assert_eq!(output_hash(&manifest(&dir, "heatmap"), "heatmap"), first);

    // alpha outside [0, 1] is a usage error
    let mut bad = hm.to_vec();
    bad.extend(["--alpha", "1.5"]);
    assert_eq!(skinmap(&bad).status.code(), Some(2));
}
