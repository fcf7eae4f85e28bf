use std::path::PathBuf;

use pcd::config::{canonical_json, parse_config_str, preset};
use pcd::Error;
use pcd_core::distill::LossLevel;
use pcd_core::trainer::Config;

fn err_path(text: &str) -> String {
    match parse_config_str(text) {
        Err(Error::Config { path, .. }) => path,
        other => panic!("expected a config error, got {other:?}"),
    }
}

fn presets_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn defaults_true_gives_desk_config() {
    assert_eq!(parse_config_str(r#"{"defaults": true}"#).unwrap(), Config::desk());
    assert_eq!(parse_config_str(r#"{"defaults": "desk"}"#).unwrap(), Config::desk());
    assert_eq!(parse_config_str(r#"{"defaults": "full"}"#).unwrap(), Config::full_scale());
}

#[test]
fn overrides_merge_into_defaults() {
    let c = parse_config_str(r#"{"defaults": true, "seed": 9, "loss": {"level": "image"}, "optim": {"max_steps": 3}}"#).unwrap();
    assert_eq!(c.seed, 9);
    assert_eq!(c.loss.level, LossLevel::Image);
    assert_eq!(c.loss.tau, 0.2);
    assert_eq!(c.optim.max_steps, Some(3));
    assert_eq!(c.optim.batch_size, Config::desk().optim.batch_size);
}

#[test]
fn negative_tau_names_its_key() {
    assert_eq!(err_path(r#"{"defaults": true, "loss": {"tau": -1}}"#), "loss.tau");
    assert_eq!(err_path(r#"{"defaults": true, "loss": {"tau": 0}}"#), "loss.tau");
}

#[test]
fn unknown_keys_are_rejected() {
    assert_eq!(err_path(r#"{"defaults": true, "loss": {"tua": 0.2}}"#), "loss.tua");
    assert_eq!(err_path(r#"{"defaults": true, "extra": 1}"#), "extra");
}

#[test]
fn type_mismatch_names_its_key() {
    assert_eq!(err_path(r#"{"defaults": true, "optim": {"batch_size": "big"}}"#), "optim.batch_size");
}

#[test]
fn missing_keys_without_defaults() {
    let msg = parse_config_str(r#"{"seed": 1}"#).unwrap_err().to_string();
    assert!(msg.contains("missing field"), "{msg}");
    let full = canonical_json(&Config::desk());
    let mut v: serde_json::Value = serde_json::from_str(&full).unwrap();
    v["loss"].as_object_mut().unwrap().remove("tau");
    assert_eq!(err_path(&v.to_string()), "loss");
}

#[test]
fn bad_defaults_value() {
    assert_eq!(err_path(r#"{"defaults": "huge"}"#), "defaults");
    assert_eq!(err_path(r#"{"defaults": 3}"#), "defaults");
    assert_eq!(err_path("[1]"), "(root)");
    assert_eq!(err_path("{"), "(root)");
}

#[test]
fn canonical_form_round_trips() {
    for cfg in [Config::desk(), Config::full_scale()] {
        let text = canonical_json(&cfg);
        let back = parse_config_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(canonical_json(&back), text);
    }
    let merged = parse_config_str(r#"{"defaults": true, "seed": 4, "student": {"mhsa": null}}"#).unwrap();
    assert_eq!(parse_config_str(&canonical_json(&merged)).unwrap(), merged);
}

#[test]
fn shipped_preset_files_match() {
    for name in ["desk", "full"] {
        let text = std::fs::read_to_string(presets_dir().join(format!("{name}.json"))).unwrap();
        assert_eq!(text, canonical_json(&preset(name).unwrap()), "configs/{name}.json is stale");
    }
}

#[test]
fn full_preset_values() {
    let c = pcd::load_config(presets_dir().join("full.json")).unwrap();
    assert_eq!(c.loss.tau, 0.2);
    assert_eq!(c.queue.capacity, 65536);
    assert_eq!(c.optim.weight_decay, 1e-5);
    assert_eq!(c.optim.momentum, 0.9);
}
