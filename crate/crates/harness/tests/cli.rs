//! CLI behavior: flags, error envelopes, file layout contracts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_anomap")
}

fn tmp(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(
        &path,
        r#"
seed = 5
[data]
train_eu = 2
eval_eu = 1
eval_ds_per_group = 1
slices_per_subject = 5
[vqvae]
epochs = 2
[rae]
epochs = 2
[ddim]
epochs = 2
[classifier]
epochs = 2
"#,
    )
    .unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn anomap")
}

fn run_ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn unknown_config_keys_are_rejected_with_error_json() {
    let dir = tmp("cli_badcfg");
    let cfg = dir.join("bad.toml");
    std::fs::write(&cfg, "seed = 1\nmystery_knob = 3\n").unwrap();
    let out = run(&["generate-data", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let parsed: serde_json::Value =
        serde_json::from_str(stderr.lines().last().unwrap()).expect("stderr must be JSON");
    assert!(parsed["error"].as_str().unwrap().contains("mystery_knob"));
}

#[test]
fn generate_data_layout_and_force() {
    let dir = tmp("cli_generate");
    let cfg = write_tiny_config(&dir);
    let out_dir = dir.join("run");
    run_ok(&[
        "generate-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);

    // Default protocol: train split EU-only, eval split all four groups.
    let train: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("data/train/manifest.json")).unwrap())
            .unwrap();
    for subject in train["subjects"].as_array().unwrap() {
        assert_eq!(subject["group"], "EU");
    }
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("data/eval/manifest.json")).unwrap())
            .unwrap();
    let groups: std::collections::BTreeSet<String> = eval["subjects"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["group"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(
        groups,
        ["EU", "DS_noAD", "DS_prodromal", "DS_AD"]
            .into_iter()
            .map(String::from)
            .collect()
    );

    // DS eval subjects carry five slice files each (k = 2).
    let ds_subject = eval["subjects"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["group"] == "DS_AD")
        .unwrap();
    let id = ds_subject["id"].as_str().unwrap();
    let slice_dir = out_dir.join("slices/eval").join(id);
    let pngs = std::fs::read_dir(&slice_dir)
        .unwrap()
        .filter(|e| {
            let name = e.as_ref().unwrap().file_name().into_string().unwrap();
            name.starts_with("slice_") && name.ends_with(".png")
        })
        .count();
    assert_eq!(pngs, 5, "expected 5 slice PNGs in {}", slice_dir.display());

    // Volumes and labels exist for every manifest entry.
    for subject in eval["subjects"].as_array().unwrap() {
        let vol = out_dir.join(subject["volume_path"].as_str().unwrap());
        let lab = out_dir.join(subject["labels_path"].as_str().unwrap());
        assert!(vol.exists() && lab.exists());
    }

    // Re-running without --force must refuse; with --force it succeeds.
    let out = run(&[
        "generate-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--force"), "stderr: {stderr}");
    run_ok(&[
        "generate-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--force",
    ]);
}

#[test]
fn train_curves_checkpoints_and_seed_sensitivity() {
    let dir = tmp("cli_train");
    let cfg = write_tiny_config(&dir);
    let out_dir = dir.join("run");
    let cfg_s = cfg.to_str().unwrap();
    let out_s = out_dir.to_str().unwrap();
    run_ok(&["generate-data", "--config", cfg_s, "--out", out_s]);
    run_ok(&["train", "--config", cfg_s, "--out", out_s, "--family", "vqvae"]);

    // Curve CSV has one row per epoch (+ header).
    let curve = std::fs::read_to_string(out_dir.join("checkpoints/curve_vqvae_base.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 2);

    // H-trained variant stores the template histogram with the run.
    run_ok(&[
        "train", "--config", cfg_s, "--out", out_s, "--family", "vqvae", "--variant", "h_trained",
    ]);
    assert!(out_dir.join("checkpoints/template_histogram.json").exists());
    let base = std::fs::read(out_dir.join("checkpoints/vqvae_base.bin")).unwrap();
    let h = std::fs::read(out_dir.join("checkpoints/vqvae_h_trained.bin")).unwrap();
    assert_ne!(base, h);

    // Different seed -> different checkpoint bytes.
    let out_dir2 = dir.join("run2");
    let out2_s = out_dir2.to_str().unwrap();
    run_ok(&["generate-data", "--config", cfg_s, "--out", out2_s, "--seed", "6"]);
    run_ok(&[
        "train", "--config", cfg_s, "--out", out2_s, "--seed", "6", "--family", "vqvae",
    ]);
    let other = std::fs::read(out_dir2.join("checkpoints/vqvae_base.bin")).unwrap();
    assert_ne!(base, other);

    // EU-only guard propagates for h_trained ddim (invalid combination).
    let out = run(&[
        "train", "--config", cfg_s, "--out", out_s, "--family", "ddim", "--variant", "h_trained",
    ]);
    assert!(!out.status.success());
}

#[test]
fn reconstruct_requires_classifier_for_guided_ddim() {
    let dir = tmp("cli_noclf");
    let cfg = write_tiny_config(&dir);
    let out_dir = dir.join("run");
    let cfg_s = cfg.to_str().unwrap();
    let out_s = out_dir.to_str().unwrap();
    run_ok(&["generate-data", "--config", cfg_s, "--out", out_s]);
    run_ok(&["train", "--config", cfg_s, "--out", out_s, "--family", "ddim"]);
    let out = run(&["reconstruct", "--config", cfg_s, "--out", out_s, "--family", "ddim"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("classifier"), "stderr: {stderr}");
}

#[test]
fn ablation_requires_both_checkpoints_and_emits_four_rows() {
    let dir = tmp("cli_ablation");
    let cfg = write_tiny_config(&dir);
    let out_dir = dir.join("run");
    let cfg_s = cfg.to_str().unwrap();
    let out_s = out_dir.to_str().unwrap();
    run_ok(&["generate-data", "--config", cfg_s, "--out", out_s]);
    run_ok(&["train", "--config", cfg_s, "--out", out_s, "--family", "vqvae"]);

    // Missing h_trained checkpoint is a named error.
    let out = run(&["ablation", "--config", cfg_s, "--out", out_s, "--family", "vqvae"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("h_trained"));

    run_ok(&[
        "train", "--config", cfg_s, "--out", out_s, "--family", "vqvae", "--variant", "h_trained",
    ]);
    run_ok(&["ablation", "--config", cfg_s, "--out", out_s, "--family", "vqvae"]);
    let table = std::fs::read_to_string(out_dir.join("tables/ablation_vqvae.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4, "expected exactly four variant rows");
    let methods: Vec<&str> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(
        methods,
        vec!["VQ-VAE", "HVQ-VAE", "VQ-VAE + HIST M", "HVQ-VAE + HIST M"]
    );
}

#[test]
fn volumetry_single_subject_groups_and_report_layout() {
    let dir = tmp("cli_vol_report");
    let cfg = write_tiny_config(&dir);
    let out_dir = dir.join("run");
    let cfg_s = cfg.to_str().unwrap();
    let out_s = out_dir.to_str().unwrap();
    run_ok(&["generate-data", "--config", cfg_s, "--out", out_s]);
    // Single-subject groups are fine (mean of one).
    run_ok(&["volumetry", "--config", cfg_s, "--out", out_s]);
    assert!(out_dir.join("tables/volumetry.csv").exists());
    assert!(out_dir.join("tables/volumetry.txt").exists());

    // Report with no reconstructions is an error.
    let out = run(&["report", "--config", cfg_s, "--out", out_s]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nothing to report"));

    run_ok(&["train", "--config", cfg_s, "--out", out_s, "--family", "vqvae"]);
    run_ok(&["reconstruct", "--config", cfg_s, "--out", out_s, "--family", "vqvae"]);
    run_ok(&["report", "--config", cfg_s, "--out", out_s]);

    // One panel per eval subject, carrying the subject id in the filename
    // and a metadata sidecar; one average panel per DS group + EU.
    let figures: Vec<String> = std::fs::read_dir(out_dir.join("figures"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    let subject_panels = figures
        .iter()
        .filter(|f| f.starts_with("subject_") && f.ends_with(".png"))
        .count();
    assert_eq!(subject_panels, 4, "one panel per eval subject");
    for f in figures.iter().filter(|f| f.starts_with("subject_") && f.ends_with(".png")) {
        let meta = f.replace(".png", ".json");
        assert!(figures.contains(&meta), "panel {f} missing metadata");
    }
    let avg_panels = figures
        .iter()
        .filter(|f| f.starts_with("group_") && f.ends_with("_avg.png"))
        .count();
    assert_eq!(avg_panels, 4, "average panels for EU + three DS groups");

    // Evaluate emits csv/json/txt with the documented header.
    run_ok(&["evaluate", "--config", cfg_s, "--out", out_s]);
    let metrics = std::fs::read_to_string(out_dir.join("tables/metrics.csv")).unwrap();
    assert!(metrics
        .lines()
        .next()
        .unwrap()
        .starts_with("dataset,method,ssim_mean,ssim_sd,mse_mean,mse_sd,n"));
}
