//! CLI-level contracts: exit codes, dependency ordering between phases, and
//! config validation through the binary interface.

use std::path::Path;
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_offdyn")
}

fn smoke_config() -> &'static str {
    concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.json")
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let out = Command::new(bin()).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.to_lowercase().contains("usage"), "{text}");
}

#[test]
fn plan_without_checkpoints_names_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(bin())
        .args([
            "plan",
            "--config",
            smoke_config(),
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(
        text.contains("train-diffusion"),
        "error should point at the missing phase: {text}"
    );
}

#[test]
fn train_energy_needs_only_datasets() {
    // Energies train from datasets alone; no diffusion checkpoint required.
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let run = |sub: &str| {
        Command::new(bin())
            .args([
                sub,
                "--config",
                smoke_config(),
                "--out",
                out_dir,
                "--set",
                "data.source_transitions=600",
                "--set",
                "data.target_transitions=200",
                "--set",
                "energy.train_steps=20",
                "--set",
                "energy.reward_steps=20",
                "--set",
                "energy.hidden=16",
            ])
            .output()
            .unwrap()
    };
    let collect = run("collect-data");
    assert!(collect.status.success(), "{}", String::from_utf8_lossy(&collect.stderr));
    let energy = run("train-energy");
    assert!(energy.status.success(), "{}", String::from_utf8_lossy(&energy.stderr));
    assert!(!Path::new(out_dir).join("checkpoints/diffusion.json").exists());
    assert!(Path::new(out_dir).join("checkpoints/energy.json").exists());
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("bad.json");
    let mut value: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(smoke_config()).unwrap()).unwrap();
    value["diffusion"]["mystery_knob"] = serde_json::json!(12);
    std::fs::write(&config_path, serde_json::to_string(&value).unwrap()).unwrap();
    let out = Command::new(bin())
        .args(["collect-data", "--config", config_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("mystery_knob"), "{text}");
}

#[test]
fn report_on_empty_run_names_the_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(bin())
        .args([
            "report",
            "--config",
            smoke_config(),
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("eval"), "{text}");
}

#[test]
fn artifacts_carry_config_hash_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let out = Command::new(bin())
        .args([
            "collect-data",
            "--config",
            smoke_config(),
            "--out",
            out_dir,
            "--seed",
            "9",
            "--set",
            "data.source_transitions=300",
            "--set",
            "data.target_transitions=100",
            "--set",
            "data.anchor_episodes=2",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let anchors: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(Path::new(out_dir).join("datasets/anchors.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(anchors["seed"], 9);
    assert!(anchors["config_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn collect_data_is_byte_reproducible() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [&dir_a, &dir_b] {
        let out = Command::new(bin())
            .args([
                "collect-data",
                "--config",
                smoke_config(),
                "--out",
                dir.path().to_str().unwrap(),
                "--set",
                "data.source_transitions=400",
                "--set",
                "data.target_transitions=100",
                "--set",
                "data.anchor_episodes=2",
            ])
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    let a = std::fs::read(dir_a.path().join("datasets/source.csv")).unwrap();
    let b = std::fs::read(dir_b.path().join("datasets/source.csv")).unwrap();
    assert_eq!(a, b, "same config and seed must produce identical bytes");
}
