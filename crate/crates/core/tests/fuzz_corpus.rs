//! The checked-in fuzz seeds must stay valid inputs as formats evolve.

use std::fs;
use std::path::PathBuf;

use hise_core::config::{parse_data_config, RunConfig};
use hise_core::datamodel::{parse_texts, parse_videos};
use hise_core::train::Checkpoint;

fn seeds(target: &str) -> Vec<(PathBuf, String)> {
    let dir = PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fuzz/corpus")).join(target);
    let mut files: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|entry| entry.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "no seeds for {target}");
    files.into_iter().map(|p| (p.clone(), fs::read_to_string(&p).unwrap())).collect()
}

#[test]
fn record_seeds_parse() {
    for (path, text) in seeds("parse_videos") {
        assert!(!parse_videos(&text, "videos").unwrap().is_empty(), "{}", path.display());
    }
    for (path, text) in seeds("parse_texts") {
        parse_texts(&text, "texts").unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

#[test]
fn config_seeds_parse_and_validate() {
    for (path, text) in seeds("run_config") {
        let cfg = RunConfig::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
    for (path, text) in seeds("data_config") {
        let cfg = parse_data_config(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap();
    }
}

#[test]
fn checkpoint_seeds_load() {
    for (path, text) in seeds("checkpoint") {
        let ckpt = Checkpoint::from_json(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        ckpt.validate().unwrap();
    }
}
