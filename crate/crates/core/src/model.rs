//! Domain records shared by every stage, plus the canonical text form and
//! content-addressed identifiers they are keyed by.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

/// NFC-normalize, trim, and collapse internal whitespace runs to one space.
pub fn canonicalize(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    let mut out = String::with_capacity(nfc.len());
    for token in nfc.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(token);
    }
    out
}

/// SHA-256 of the UTF-8 bytes, lowercase hex (64 chars).
pub fn content_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Hash several fields with an unambiguous unit separator between them.
pub(crate) fn hash_fields(fields: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for (i, field) in fields.iter().enumerate() {
        if i > 0 {
            hasher.update([0x1f]);
        }
        hasher.update(field.as_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Whitespace token count; the unit used for chunking and context budgets.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedOrigin {
    Human,
    HumanLlmCollab,
}

impl fmt::Display for SeedOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeedOrigin::Human => f.write_str("human"),
            SeedOrigin::HumanLlmCollab => f.write_str("human_llm_collab"),
        }
    }
}

/// A curated domain question. Construct through [`SeedQuery::new`] so the id
/// always matches the canonical text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedQuery {
    pub id: String,
    pub text: String,
    pub category: Option<String>,
    pub origin: SeedOrigin,
    pub stage: u32,
}

impl SeedQuery {
    /// Returns `None` when the text canonicalizes to the empty string.
    pub fn new(text: &str, category: Option<String>, origin: SeedOrigin, stage: u32) -> Option<Self> {
        let text = canonicalize(text);
        if text.is_empty() {
            return None;
        }
        Some(Self {
            id: content_hash(&text),
            text,
            category,
            origin,
            stage: stage.max(1),
        })
    }

    pub fn to_instruction(&self) -> Instruction {
        Instruction {
            id: self.id.clone(),
            text: self.text.clone(),
            origin: InstructionOrigin::Seed,
            parent_ids: Vec::new(),
            iteration: 0,
            stage: self.stage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionOrigin {
    Seed,
    Expanded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: String,
    pub text: String,
    pub origin: InstructionOrigin,
    pub parent_ids: Vec<String>,
    /// Expansion iteration that produced this instruction; 0 for seeds.
    pub iteration: u32,
    pub stage: u32,
}

impl Instruction {
    /// An expanded instruction. Returns `None` for empty text or an empty
    /// parent list, or when `iteration` is 0.
    pub fn expanded(text: &str, parent_ids: Vec<String>, iteration: u32, stage: u32) -> Option<Self> {
        let text = canonicalize(text);
        if text.is_empty() || parent_ids.is_empty() || iteration == 0 {
            return None;
        }
        Some(Self {
            id: content_hash(&text),
            text,
            origin: InstructionOrigin::Expanded,
            parent_ids,
            iteration,
            stage: stage.max(1),
        })
    }

    /// Bare instruction from free text, treated as a seed-level item.
    pub fn from_text(text: &str, stage: u32) -> Option<Self> {
        let text = canonicalize(text);
        if text.is_empty() {
            return None;
        }
        Some(Self {
            id: content_hash(&text),
            text,
            origin: InstructionOrigin::Seed,
            parent_ids: Vec::new(),
            iteration: 0,
            stage: stage.max(1),
        })
    }

    /// Checks the origin / iteration / parent coupling.
    pub fn is_well_formed(&self) -> bool {
        let seed = self.origin == InstructionOrigin::Seed;
        seed == (self.iteration == 0) && seed == self.parent_ids.is_empty()
    }
}

/// The instruction pool `Q ∪ I`, keyed by id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InstructionPool {
    seeds: BTreeMap<String, SeedQuery>,
    expanded: BTreeMap<String, Instruction>,
}

impl InstructionPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.seeds.contains_key(id) || self.expanded.contains_key(id)
    }

    /// Inserts a seed; returns false (and leaves the pool untouched) if a
    /// member with the same canonical text is already present.
    pub fn insert_seed(&mut self, seed: SeedQuery) -> bool {
        if self.contains(&seed.id) {
            return false;
        }
        self.seeds.insert(seed.id.clone(), seed);
        true
    }

    /// Inserts an expanded instruction; rejects exact duplicates, seed-origin
    /// records, and parents that are not already pool members.
    pub fn insert_expanded(&mut self, instruction: Instruction) -> bool {
        if instruction.origin != InstructionOrigin::Expanded
            || !instruction.is_well_formed()
            || self.contains(&instruction.id)
            || !instruction.parent_ids.iter().all(|p| self.contains(p))
        {
            return false;
        }
        self.expanded.insert(instruction.id.clone(), instruction);
        true
    }

    pub fn seeds(&self) -> impl Iterator<Item = &SeedQuery> {
        self.seeds.values()
    }

    pub fn expanded(&self) -> impl Iterator<Item = &Instruction> {
        self.expanded.values()
    }

    pub fn seed_count(&self) -> usize {
        self.seeds.len()
    }

    pub fn expanded_count(&self) -> usize {
        self.expanded.len()
    }

    pub fn len(&self) -> usize {
        self.seeds.len() + self.expanded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The union view, ordered by id.
    pub fn all(&self) -> Vec<Instruction> {
        let mut all: Vec<Instruction> = self
            .seeds
            .values()
            .map(SeedQuery::to_instruction)
            .chain(self.expanded.values().cloned())
            .collect();
        all.sort_by(|a, b| a.id.cmp(&b.id));
        all
    }

    pub fn seed_instructions(&self) -> Vec<Instruction> {
        self.seeds.values().map(SeedQuery::to_instruction).collect()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.seeds
            .values()
            .map(|s| s.text.as_str())
            .chain(self.expanded.values().map(|i| i.text.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    LocalCorpus,
    WebSearch,
    ExternalApi,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceRef {
    pub kind: SourceKind,
    /// Document id, URL, or API descriptor.
    pub locator: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStatus {
    Raw,
    RuleCleaned,
    Kept,
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub id: String,
    pub instruction_id: String,
    pub chunk_text: String,
    pub source: SourceRef,
    pub score: f64,
    pub rank: u32,
    pub filter_status: FilterStatus,
}

impl RetrievedContext {
    pub fn new(instruction_id: &str, chunk_text: String, source: SourceRef, score: f64, rank: u32) -> Self {
        let id = hash_fields(&[instruction_id, &source.locator, &chunk_text]);
        Self {
            id,
            instruction_id: instruction_id.to_string(),
            chunk_text,
            source,
            score: if score.is_finite() { score.max(0.0) } else { 0.0 },
            rank,
            filter_status: FilterStatus::Raw,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub provider: String,
    pub model: String,
    pub template_id: String,
    pub timestamp: String,
    pub tokens: TokenUsage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub instruction: Instruction,
    pub answer: String,
    pub context_ids: Vec<String>,
    pub grounded: bool,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub instruction: Instruction,
    pub rejected: String,
    pub chosen: String,
    pub edit_ratio: f64,
    pub context_ids: Vec<String>,
    pub no_change_needed: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonicalize_trims_and_collapses() {
        assert_eq!(canonicalize("  plan a trip  "), "plan a trip");
        assert_eq!(canonicalize("plan\t a \n\ntrip"), "plan a trip");
        assert_eq!(canonicalize("abc"), "abc");
        assert_eq!(canonicalize(""), "");
        assert_eq!(canonicalize(" \t\n"), "");
    }

    #[test]
    fn canonicalize_merges_composed_and_decomposed_forms() {
        // NFC oracle: U+0065 U+0301 composes to U+00E9.
        let composed = "caf\u{00E9}";
        let decomposed = "cafe\u{0301}";
        assert_ne!(composed.as_bytes(), decomposed.as_bytes());
        assert_eq!(canonicalize(composed).as_bytes(), canonicalize(decomposed).as_bytes());
        assert_eq!(canonicalize(decomposed).as_bytes(), "caf\u{00E9}".as_bytes());
    }

    #[test]
    fn canonicalize_keeps_arabic_presentation_forms() {
        // NFC leaves compatibility characters alone (NFKC would fold them).
        let presentation = "\u{FEE1}";
        assert_eq!(canonicalize(presentation), presentation);
    }

    #[test]
    fn content_hash_reference_vectors() {
        assert_eq!(
            content_hash(""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            content_hash("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(content_hash("abc"), content_hash("abc"));
        assert_ne!(content_hash("abc"), content_hash("abd"));
        assert_eq!(content_hash("x").len(), 64);
    }

    #[test]
    fn seed_ids_follow_canonical_text() {
        let a = SeedQuery::new("  how to cook  rice", None, SeedOrigin::Human, 1).unwrap();
        let b = SeedQuery::new("how to cook rice", Some("rice".into()), SeedOrigin::HumanLlmCollab, 2).unwrap();
        assert_eq!(a.id, b.id);
        assert!(SeedQuery::new("   ", None, SeedOrigin::Human, 1).is_none());
    }

    #[test]
    fn pool_rejects_duplicates_and_orphans() {
        let mut pool = InstructionPool::new();
        let seed = SeedQuery::new("seed one", None, SeedOrigin::Human, 1).unwrap();
        assert!(pool.insert_seed(seed.clone()));
        assert!(!pool.insert_seed(seed.clone()));

        let orphan = Instruction::expanded("new question", vec!["missing".into()], 1, 1).unwrap();
        assert!(!pool.insert_expanded(orphan));

        let child = Instruction::expanded("new question", vec![seed.id.clone()], 1, 1).unwrap();
        assert!(pool.insert_expanded(child.clone()));
        assert!(!pool.insert_expanded(child));

        let dup_of_seed = Instruction::expanded("seed  one", vec![seed.id.clone()], 1, 1).unwrap();
        assert!(!pool.insert_expanded(dup_of_seed));
        assert_eq!(pool.len(), 2);
        assert!(pool.all().iter().all(Instruction::is_well_formed));
    }

    #[test]
    fn expanded_requires_parents_and_iteration() {
        assert!(Instruction::expanded("q", vec![], 1, 1).is_none());
        assert!(Instruction::expanded("q", vec!["p".into()], 0, 1).is_none());
        assert!(Instruction::expanded(" ", vec!["p".into()], 1, 1).is_none());
    }
}
