//! Seed ingestion, subset sampling, and per-stage accounting.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{parse_jsonl, JsonlError};
use crate::model::{Instruction, InstructionPool, SeedOrigin, SeedQuery};

#[derive(Debug, Error)]
pub enum SeedError {
    #[error(transparent)]
    Parse(#[from] JsonlError),
    #[error("{0}: no valid seeds; at least one is required")]
    EmptySeedSet(String),
}

/// One line of a seed file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRecord {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub origin: SeedOrigin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<u32>,
}

impl From<&SeedQuery> for SeedRecord {
    fn from(seed: &SeedQuery) -> Self {
        Self {
            text: seed.text.clone(),
            category: seed.category.clone(),
            origin: seed.origin,
            stage: Some(seed.stage),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DroppedSeed {
    /// 1-based line number among non-blank records.
    pub record: usize,
    pub reason: DropReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    Duplicate,
    EmptyText,
}

#[derive(Debug, Clone)]
pub struct LoadedSeeds {
    pub pool: InstructionPool,
    pub dropped: Vec<DroppedSeed>,
}

pub fn load_seeds(path: &Path, default_stage: u32) -> Result<LoadedSeeds, SeedError> {
    let content = std::fs::read_to_string(path).map_err(|source| JsonlError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let records: Vec<SeedRecord> = parse_jsonl(path, &content)?;
    let loaded = seeds_from_records(records, default_stage);
    if loaded.pool.is_empty() {
        return Err(SeedError::EmptySeedSet(path.display().to_string()));
    }
    Ok(loaded)
}

pub fn seeds_from_records(records: Vec<SeedRecord>, default_stage: u32) -> LoadedSeeds {
    let mut pool = InstructionPool::new();
    let mut dropped = Vec::new();
    for (i, rec) in records.into_iter().enumerate() {
        let stage = rec.stage.unwrap_or(default_stage);
        match SeedQuery::new(&rec.text, rec.category, rec.origin, stage) {
            None => {
                tracing::warn!(record = i + 1, "dropping seed with empty text");
                dropped.push(DroppedSeed {
                    record: i + 1,
                    reason: DropReason::EmptyText,
                });
            }
            Some(seed) => {
                let id = seed.id.clone();
                if !pool.insert_seed(seed) {
                    tracing::info!(record = i + 1, %id, "dropping duplicate seed");
                    dropped.push(DroppedSeed {
                        record: i + 1,
                        reason: DropReason::Duplicate,
                    });
                }
            }
        }
    }
    LoadedSeeds { pool, dropped }
}

/// Seeds in file form, ordered by id; re-loading the output reproduces the pool.
pub fn export_seeds(pool: &InstructionPool) -> Vec<SeedRecord> {
    pool.seeds().map(SeedRecord::from).collect()
}

/// Uniform sample of `n` members without replacement.
///
/// Candidates are first ordered by id. The generator is
/// `ChaCha8Rng::seed_from_u64(rng_seed)` driving a partial Fisher–Yates
/// shuffle (`j = random_range(i..len)` for `i` in `0..n`); the result is in
/// draw order. When `n` exceeds the candidate count every member is
/// returned.
pub fn sample_subset(candidates: &[Instruction], n: usize, rng_seed: u64) -> Vec<Instruction> {
    let mut items: Vec<&Instruction> = candidates.iter().collect();
    items.sort_by(|a, b| a.id.cmp(&b.id));
    let take = n.min(items.len());
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    for i in 0..take {
        let j = rng.random_range(i..items.len());
        items.swap(i, j);
    }
    items.into_iter().take(take).cloned().collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SeedStats {
    pub by_stage: BTreeMap<u32, usize>,
    pub by_category: BTreeMap<String, usize>,
    pub by_origin: BTreeMap<String, usize>,
}

pub const UNCATEGORIZED: &str = "uncategorized";

pub fn seed_stats(pool: &InstructionPool) -> SeedStats {
    let mut stats = SeedStats::default();
    for seed in pool.seeds() {
        *stats.by_stage.entry(seed.stage).or_default() += 1;
        let cat = seed.category.clone().unwrap_or_else(|| UNCATEGORIZED.to_string());
        *stats.by_category.entry(cat).or_default() += 1;
        *stats.by_origin.entry(seed.origin.to_string()).or_default() += 1;
    }
    stats
}
