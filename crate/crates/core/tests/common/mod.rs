#![allow(dead_code)]
pub mod oracle;

use std::path::{Path, PathBuf};

use groundset::model::Instruction;
use groundset::pipeline::{RunConfig, RunOptions};

pub const STAMP: &str = "2025-01-01T00:00:00Z";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn toy_dir() -> PathBuf {
    fixtures().join("toy")
}

/// The bundled toy config, writing into `out`.
pub fn toy_config(out: &Path) -> RunConfig {
    let mut config = RunConfig::load(&toy_dir().join("config.toml")).expect("toy config loads");
    config.paths.output_dir = out.to_path_buf();
    config
}

pub fn fixed_options() -> RunOptions {
    RunOptions {
        timestamp: Some(STAMP.into()),
        ..RunOptions::default()
    }
}

pub fn resume_options() -> RunOptions {
    RunOptions {
        resume: true,
        ..fixed_options()
    }
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Asserts two files are byte-identical, reporting the first differing line.
pub fn assert_same_file(a: &Path, b: &Path) {
    let (x, y) = (read(a), read(b));
    if x == y {
        return;
    }
    let (xs, ys) = (String::from_utf8_lossy(&x), String::from_utf8_lossy(&y));
    let line = xs.lines().zip(ys.lines()).position(|(l, r)| l != r);
    panic!(
        "{} and {} differ (first differing line: {:?}; {} vs {} lines)",
        a.display(),
        b.display(),
        line.map(|i| i + 1),
        xs.lines().count(),
        ys.lines().count()
    );
}

pub fn read_pool(out: &Path) -> Vec<Instruction> {
    groundset::io::read_jsonl(&out.join("pool.jsonl")).expect("pool.jsonl parses")
}

/// Output files whose bytes must not depend on scheduling or interruption.
/// (`effective_config.toml` is excluded because it records the output path.)
pub const DETERMINISTIC_OUTPUTS: [&str; 9] = [
    "seeds.jsonl",
    "pool.jsonl",
    "expansion_report.json",
    "contexts.jsonl",
    "dataset.stage1.jsonl",
    "provenance.jsonl",
    "manifest.json",
    "report.json",
    "run.log",
];

pub const EDIT_OUTPUTS: [&str; 5] = [
    "preferences.jsonl",
    "quarantine.jsonl",
    "edit_contexts.jsonl",
    "edit_report.json",
    "run.log",
];
