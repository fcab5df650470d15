//! End-to-end tests of the `masrc` binary: every subcommand runs as a real
//! process against small on-disk datasets.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn masrc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_masrc"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn masrc");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_json(path: &Path, value: &Value) {
    std::fs::write(path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
}

fn synth_section(videos: usize, scenes: usize) -> Value {
    json!({
        "num_videos": videos,
        "scenes_per_video": scenes,
        "shots_per_scene_min": 3,
        "shots_per_scene_max": 5,
        "dim_entity": 6,
        "dim_place": 6,
        "noise": 0.1,
        "entity_pool": 2,
        "entity_recurrence": 0.5,
    })
}

/// Generates a dataset under `dir/<name>` and returns its manifest path.
fn synth_dataset(dir: &Path, name: &str, videos: usize, seed: u64) -> PathBuf {
    let config = dir.join(format!("{name}-synth.json"));
    write_json(&config, &json!({ "synth": synth_section(videos, 3) }));
    let out = dir.join(name);
    run_ok(masrc()
        .arg("synth")
        .arg("--config")
        .arg(&config)
        .arg("--seed")
        .arg(seed.to_string())
        .arg("--out")
        .arg(&out));
    out.join("manifest.jsonl")
}

fn read_dir_sorted(dir: &Path) -> Vec<PathBuf> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    entries.sort();
    entries
}

#[test]
fn synth_is_deterministic_and_manifest_matches_video_count() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("synth.json");
    write_json(&config, &json!({ "synth": synth_section(4, 3) }));

    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let run = run_ok(masrc()
            .arg("synth")
            .arg("--config")
            .arg(&config)
            .arg("--seed")
            .arg("9")
            .arg("--out")
            .arg(&out));
        let summary: Value =
            serde_json::from_slice(&run.stdout).expect("summary is JSON");
        assert_eq!(summary["videos"], json!(4));
        assert!(summary["boundary_rate"].as_f64().unwrap() > 0.0);
        outputs.push(out);
    }

    let manifest = std::fs::read_to_string(outputs[0].join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 4, "one manifest line per video");

    // Same config and seed must give byte-identical files.
    for (a, b) in read_dir_sorted(&outputs[0].join("features"))
        .iter()
        .zip(read_dir_sorted(&outputs[1].join("features")).iter())
    {
        assert_eq!(a.file_name(), b.file_name());
        assert_eq!(
            std::fs::read(a).unwrap(),
            std::fs::read(b).unwrap(),
            "feature file {} differs between identical runs",
            a.display()
        );
    }
    assert_eq!(
        std::fs::read(outputs[0].join("manifest.jsonl")).unwrap(),
        std::fs::read(outputs[1].join("manifest.jsonl")).unwrap()
    );
}

#[test]
fn synth_rejects_zero_scene_config_with_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("synth.json");
    write_json(&config, &json!({ "synth": synth_section(2, 0) }));
    let out = masrc()
        .arg("synth")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(tmp.path().join("ds"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("scenes_per_video"),
        "stderr should name the bad field: {stderr}"
    );
}

/// Trains a tiny model and returns the run directory.
fn train_tiny(tmp: &Path, train_manifest: &Path, val_manifest: &Path) -> PathBuf {
    let run_dir = tmp.join("run");
    let config = tmp.join("train.json");
    write_json(
        &config,
        &json!({
            "train_manifest": train_manifest,
            "val_manifest": val_manifest,
            "t": 8,
            "k": 2,
            "batch_size": 16,
            "peak_lr": 3e-3,
            "epochs": 2,
            "seed": 5,
        }),
    );
    let out = run_ok(masrc()
        .arg("train")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&run_dir));
    let printed = String::from_utf8_lossy(&out.stdout);
    assert!(
        printed.trim().ends_with("checkpoint.bin"),
        "train should print the checkpoint path, got: {printed}"
    );
    assert!(run_dir.join("checkpoint.bin").exists());
    assert!(run_dir.join("config.json").exists());
    let metrics = std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().count() >= 1);
    for line in metrics.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        assert!(rec["ap"].is_number(), "metrics line missing ap: {line}");
    }
    run_dir
}

#[test]
fn predict_scores_reproduce_eval_average_precision() {
    let tmp = tempfile::tempdir().unwrap();
    let train_manifest = synth_dataset(tmp.path(), "train", 4, 1);
    let val_manifest = synth_dataset(tmp.path(), "val", 2, 2);
    let run_dir = train_tiny(tmp.path(), &train_manifest, &val_manifest);

    let eval_out = run_ok(masrc()
        .arg("eval")
        .arg("--run")
        .arg(&run_dir)
        .arg("--data")
        .arg(&val_manifest));
    let eval: Value = serde_json::from_slice(&eval_out.stdout).unwrap();
    for key in ["ap", "miou", "f1"] {
        let v = eval[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} out of range: {v}");
    }

    let pred_path = tmp.path().join("pred.jsonl");
    run_ok(masrc()
        .arg("predict")
        .arg("--run")
        .arg(&run_dir)
        .arg("--data")
        .arg(&val_manifest)
        .arg("--out")
        .arg(&pred_path));

    // Pool the predicted scores against the manifest labels and recompute
    // AP; it must agree exactly with what eval reported.
    let mut labels_by_video = std::collections::HashMap::new();
    for line in std::fs::read_to_string(&val_manifest).unwrap().lines() {
        let entry: Value = serde_json::from_str(line).unwrap();
        let labels: Vec<u8> = entry["labels"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap() as u8)
            .collect();
        labels_by_video.insert(entry["video_id"].as_str().unwrap().to_string(), labels);
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let pred_text = std::fs::read_to_string(&pred_path).unwrap();
    assert_eq!(pred_text.lines().count(), 2, "one line per video");
    for line in pred_text.lines() {
        let pred: Value = serde_json::from_str(line).unwrap();
        let video = pred["video_id"].as_str().unwrap();
        let video_scores: Vec<f64> = pred["scores"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        let video_labels = &labels_by_video[video];
        assert_eq!(video_scores.len(), video_labels.len());
        assert!(pred["scenes"].as_array().unwrap().len() >= 1);
        let n: usize = pred["boundaries"]
            .as_array()
            .unwrap()
            .iter()
            .map(|b| b.as_u64().unwrap() as usize)
            .sum();
        assert!(n <= video_scores.len());
        scores.extend(video_scores);
        labels.extend(video_labels.iter().copied());
    }
    let ap = masrc_core_ap(&scores, &labels);
    let reported = eval["ap"].as_f64().unwrap();
    assert!(
        (ap - reported).abs() < 1e-9,
        "predict-derived AP {ap} != eval AP {reported}"
    );
}

/// Average precision under the same tie-broken ranking rule the library
/// uses: sort by descending score, earlier index first on ties, mean of
/// precision at each positive rank.
fn masrc_core_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / labels.iter().filter(|&&l| l == 1).count() as f64
}

#[test]
fn transfer_without_pseudo_labels_fails_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let train_manifest = synth_dataset(tmp.path(), "train", 2, 3);
    let val_manifest = synth_dataset(tmp.path(), "val", 2, 4);
    let config = tmp.path().join("train.json");
    write_json(
        &config,
        &json!({
            "train_manifest": train_manifest,
            "val_manifest": val_manifest,
            "t": 8,
            "k": 2,
            "epochs": 1,
            "fine_tune_lr": 1e-5,
        }),
    );
    let out = masrc()
        .arg("train")
        .arg("--config")
        .arg(&config)
        .arg("--regime")
        .arg("transfer")
        .arg("--out")
        .arg(tmp.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("pseudo"),
        "error should mention the missing pseudo labels: {stderr}"
    );
    assert!(
        !tmp.path().join("run").join("checkpoint.bin").exists(),
        "no checkpoint may be written on a failed run"
    );
}

#[test]
fn eval_with_mismatched_feature_dim_names_the_offending_slot() {
    let tmp = tempfile::tempdir().unwrap();
    let train_manifest = synth_dataset(tmp.path(), "train", 4, 1);
    let val_manifest = synth_dataset(tmp.path(), "val", 2, 2);
    let run_dir = train_tiny(tmp.path(), &train_manifest, &val_manifest);

    // A dataset with different feature dimensions than the checkpoint.
    let config = tmp.path().join("wide-synth.json");
    let mut section = synth_section(2, 3);
    section["dim_entity"] = json!(9);
    section["dim_place"] = json!(9);
    write_json(&config, &json!({ "synth": section }));
    let wide = tmp.path().join("wide");
    run_ok(masrc()
        .arg("synth")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&wide));

    let out = masrc()
        .arg("eval")
        .arg("--run")
        .arg(&run_dir)
        .arg("--data")
        .arg(wide.join("manifest.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("slot '") && stderr.contains("shape mismatch"),
        "error should name the offending slot: {stderr}"
    );
}

#[test]
fn gradcheck_passes_on_a_small_model() {
    // Two seeds: one unlucky draw can sit exactly on a rectifier or pooling
    // kink and exclude itself entirely.
    let out = run_ok(masrc()
        .arg("gradcheck")
        .arg("--seeds")
        .arg("2")
        .arg("--t")
        .arg("8")
        .arg("--dim")
        .arg("4"));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("all gradients within"),
        "gradcheck should report success: {stdout}"
    );
}
