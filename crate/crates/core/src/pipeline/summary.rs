//! Per-stage sample accounting over dataset files and manifests.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::synthesis::Manifest;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage_counts: BTreeMap<u32, usize>,
    pub total: usize,
}

impl StageSummary {
    pub fn from_counts(stage_counts: BTreeMap<u32, usize>) -> Self {
        let total = stage_counts.values().sum();
        Self { stage_counts, total }
    }

    /// Adds another summary's counts stage by stage.
    pub fn merge(&mut self, other: &StageSummary) {
        for (stage, n) in &other.stage_counts {
            *self.stage_counts.entry(*stage).or_default() += n;
        }
        self.total = self.stage_counts.values().sum();
    }
}

pub fn dataset_file_name(stage: u32) -> String {
    format!("dataset.stage{stage}.jsonl")
}

fn parse_stage(file_name: &str) -> Option<u32> {
    file_name
        .strip_prefix("dataset.stage")?
        .strip_suffix(".jsonl")?
        .parse()
        .ok()
}

/// Counts the records of every `dataset.stage<N>.jsonl` in `output_dir`.
/// Fails with `NotFound` when there is no stage dataset.
pub fn stage_summary(output_dir: &Path) -> io::Result<StageSummary> {
    let mut counts = BTreeMap::new();
    for entry in std::fs::read_dir(output_dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(stage) = name.to_str().and_then(parse_stage) else {
            continue;
        };
        let text = std::fs::read_to_string(entry.path())?;
        counts.insert(stage, text.lines().filter(|l| !l.trim().is_empty()).count());
    }
    if counts.is_empty() {
        return Err(io::Error::new(
            io::ErrorKind::NotFound,
            format!("no dataset.stage<N>.jsonl in {}", output_dir.display()),
        ));
    }
    Ok(StageSummary::from_counts(counts))
}

/// Sums the stage counts of several run manifests (one per refinement round).
pub fn aggregate_manifests<'a>(manifests: impl IntoIterator<Item = &'a Manifest>) -> StageSummary {
    let mut out = StageSummary::default();
    for m in manifests {
        out.merge(&StageSummary::from_counts(m.stage_counts.clone()));
    }
    out
}

pub fn read_manifest(path: &Path) -> io::Result<Manifest> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))
}
