//! Runs the checked-in fuzz corpus through the same decoders and invariants
//! as the fuzz targets, so every seed is exercised on stable toolchains.

use std::fs;
use std::path::PathBuf;

use vgan::config::{
    apply_overrides, parse_override, parse_run_config, parse_sweep_spec, serialize_run_config,
    serialize_sweep_spec,
};
use vgan::exact::{check_instance, OracleInstance, SoftmaxVariant};
use vgan::models::{decode_checkpoint, encode_checkpoint};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn config_seeds() {
    let mut accepted = 0;
    for (name, data) in seeds("config") {
        let text = String::from_utf8(data).unwrap();
        if let Ok(c) = parse_run_config(&text) {
            assert_eq!(parse_run_config(&serialize_run_config(&c)).as_ref(), Ok(&c), "{name}");
            accepted += 1;
        }
    }
    assert!(accepted >= 3);
}

#[test]
fn sweep_spec_seeds() {
    for (name, data) in seeds("sweep_spec") {
        let text = String::from_utf8(data).unwrap();
        if let Ok(s) = parse_sweep_spec(&text) {
            assert_eq!(parse_sweep_spec(&serialize_sweep_spec(&s)).as_ref(), Ok(&s), "{name}");
        }
    }
}

#[test]
fn override_seeds() {
    for (_, data) in seeds("override") {
        let text = String::from_utf8(data).unwrap();
        let overrides: Vec<String> = text.lines().map(str::to_string).collect();
        for o in &overrides {
            let _ = parse_override(o);
        }
        if let Ok(cfg) = apply_overrides("seed = 1\n", &overrides) {
            let _ = parse_run_config(&cfg);
        }
    }
}

#[test]
fn checkpoint_seeds() {
    let mut decoded = 0;
    for (name, data) in seeds("checkpoint") {
        if let Ok(c) = decode_checkpoint(&data) {
            assert_eq!(encode_checkpoint(&c), data, "{name}");
            decoded += 1;
        }
    }
    assert_eq!(decoded, 2);
}

#[test]
fn oracle_instance_seeds() {
    for (_, data) in seeds("oracle_instance") {
        if let Ok(inst) = serde_json::from_slice::<OracleInstance>(&data) {
            let _ = check_instance(&inst, SoftmaxVariant::Shifted);
        }
    }
}
