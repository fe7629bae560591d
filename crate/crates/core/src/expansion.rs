//! Instruction expansion: repeatedly sample a subset of the pool, ask the
//! expander model for `k` new questions, and admit the ones that survive
//! length and near-duplicate filtering.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError};
use crate::model::{canonicalize, content_hash, Instruction, InstructionPool};
use crate::prompts::{PromptTemplate, TemplateError};
use crate::seeds::sample_subset;

#[derive(Debug, Error)]
pub enum ExpansionError {
    #[error("no candidates could be parsed from the expander response")]
    ParseFailure,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("invalid expansion config: {0}")]
    Config(String),
    #[error("pool has no seeds")]
    NoSeeds,
    #[error("checkpoint hook failed: {0}")]
    Hook(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    SeedsOnly,
    #[default]
    FullPool,
}

fn default_n() -> usize {
    3
}
fn default_k() -> usize {
    4
}
fn default_threshold() -> f64 {
    0.7
}
fn default_min_len() -> usize {
    10
}
fn default_max_len() -> usize {
    600
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    pub m: u32,
    #[serde(default = "default_threshold")]
    pub dedup_threshold: f64,
    #[serde(default = "default_min_len")]
    pub min_len_chars: usize,
    #[serde(default = "default_max_len")]
    pub max_len_chars: usize,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub sample_from: SampleSource,
}

impl ExpansionConfig {
    pub fn with_iterations(m: u32) -> Self {
        Self {
            n: default_n(),
            k: default_k(),
            m,
            dedup_threshold: default_threshold(),
            min_len_chars: default_min_len(),
            max_len_chars: default_max_len(),
            rng_seed: 0,
            sample_from: SampleSource::FullPool,
        }
    }

    pub fn validate(&self) -> Result<(), ExpansionError> {
        if self.n < 1 {
            return Err(ExpansionError::Config("n must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.dedup_threshold) {
            return Err(ExpansionError::Config("dedup_threshold must lie in [0, 1]".into()));
        }
        if self.min_len_chars > self.max_len_chars {
            return Err(ExpansionError::Config("min_len_chars exceeds max_len_chars".into()));
        }
        Ok(())
    }
}

/// Counts for one iteration. `generated` is the number of candidates parsed
/// from the response, plus one when the whole response was unparseable
/// (that response is then the single `rejected_parse`).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: u32,
    pub generated: usize,
    pub rejected_duplicate: usize,
    pub rejected_length: usize,
    pub rejected_parse: usize,
    pub accepted: usize,
}

impl IterationReport {
    pub fn is_balanced(&self) -> bool {
        self.generated == self.accepted + self.rejected_duplicate + self.rejected_length + self.rejected_parse
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub iterations: Vec<IterationReport>,
}

impl ExpansionReport {
    pub fn totals(&self) -> IterationReport {
        self.iterations.iter().fold(IterationReport::default(), |mut acc, it| {
            acc.generated += it.generated;
            acc.rejected_duplicate += it.rejected_duplicate;
            acc.rejected_length += it.rejected_length;
            acc.rejected_parse += it.rejected_parse;
            acc.accepted += it.accepted;
            acc
        })
    }
}

/// Removes a leading list marker ("1.", "3)", "(2)", "- ", "Q4:", ...).
/// Returns the remaining text and whether a marker was found.
fn strip_list_marker(line: &str) -> (&str, bool) {
    let trimmed = line.trim();
    // Markdown emphasis around the marker, e.g. "**1.** text".
    let emphasized = trimmed.starts_with("**");
    let mut s = trimmed.trim_start_matches("**");
    let finish = |rest| finish_marker(rest, emphasized);

    for bullet in ['-', '*', '•', '·', '–', '—', '>', '+'] {
        if let Some(rest) = s.strip_prefix(bullet) {
            if rest.starts_with(char::is_whitespace) {
                return finish(rest);
            }
        }
    }

    for prefix in ["Question", "question", "QUESTION", "Q", "q"] {
        if let Some(rest) = s.strip_prefix(prefix) {
            let rest = rest.trim_start_matches(['#', ' ']);
            if rest.starts_with(|c: char| c.is_numeric()) {
                s = rest;
                break;
            }
        }
    }
    s = s.strip_prefix('#').unwrap_or(s);

    let open = s.starts_with(['(', '[']);
    let body = if open { &s[1..] } else { s };
    let digits_end = body.find(|c: char| !c.is_numeric()).unwrap_or(body.len());
    if digits_end > 0 {
        let rest = body[digits_end..].trim_start_matches(' ');
        match rest.chars().next() {
            Some(c @ ('.' | ')' | ']' | ':' | '-' | '،' | '٫' | '、' | '．')) => {
                let rest = rest[c.len_utf8()..].trim_start_matches(['.', ')', ']', ':']);
                return finish(rest);
            }
            Some(c) if c.is_whitespace() && open => return finish(rest),
            None => return ("", true),
            _ => {}
        }
    }

    let mut chars = body.chars();
    if let (Some(letter), Some(')')) = (chars.next(), chars.next()) {
        if letter.is_ascii_alphabetic() {
            return finish(chars.as_str());
        }
    }

    (trimmed, false)
}

fn finish_marker(rest: &str, emphasized: bool) -> (&str, bool) {
    let rest = rest.trim_start_matches('*').trim();
    let rest = if emphasized {
        rest.trim_end_matches("**").trim()
    } else {
        rest
    };
    (rest, true)
}

fn strip_quotes(s: &str) -> &str {
    let s = s.trim();
    for (open, close) in [('"', '"'), ('“', '”'), ('«', '»'), ('\'', '\'')] {
        if s.len() >= 2 && s.starts_with(open) && s.ends_with(close) {
            return s[open.len_utf8()..s.len() - close.len_utf8()].trim();
        }
    }
    s
}

/// Extracts up to `k` candidate questions from an expander reply. When any
/// line carries a list marker only marked lines count, so preambles like
/// "Here are four questions:" are ignored.
pub fn parse_candidates(response: &str, k: usize) -> Vec<String> {
    let lines: Vec<(String, bool)> = response
        .lines()
        .map(|l| {
            let (text, marked) = strip_list_marker(l);
            (strip_quotes(text).to_string(), marked)
        })
        .filter(|(t, _)| !t.is_empty())
        .collect();
    let any_marked = lines.iter().any(|(_, m)| *m);
    lines
        .into_iter()
        .filter(|(_, m)| *m || !any_marked)
        .map(|(t, _)| t)
        .take(k)
        .collect()
}

fn render_subset(subset: &[Instruction]) -> String {
    subset
        .iter()
        .enumerate()
        .map(|(i, ins)| format!("{}. {}", i + 1, ins.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// One expander call over `subset`; `k == 0` short-circuits without a call.
pub fn expand_once(
    subset: &[Instruction],
    k: usize,
    gateway: &Gateway,
    template: &PromptTemplate,
) -> Result<Vec<String>, ExpansionError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let seeds = render_subset(subset);
    let k_str = k.to_string();
    let request = template.render(&[("seeds", &seeds), ("k", &k_str)])?;
    let response = gateway.complete(&request)?;
    let candidates = parse_candidates(&response.text, k);
    if candidates.is_empty() {
        return Err(ExpansionError::ParseFailure);
    }
    Ok(candidates)
}

fn tokens(text: &str) -> Vec<String> {
    canonicalize(text).split_whitespace().map(str::to_string).collect()
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn lcs_f1(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    2.0 * lcs_len(a, b) as f64 / (a.len() + b.len()) as f64
}

/// Token-level LCS F1: `2L / (|a| + |b|)` over whitespace tokens of the
/// canonical texts; 0 when either side is empty.
pub fn similarity(a: &str, b: &str) -> f64 {
    lcs_f1(&tokens(a), &tokens(b))
}

/// Comparison set for near-duplicate rejection.
#[derive(Debug, Clone, Default)]
pub struct DedupIndex {
    ids: HashSet<String>,
    entries: Vec<Vec<String>>,
}

impl DedupIndex {
    pub fn new<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut index = Self::default();
        for t in texts {
            index.insert(t);
        }
        index
    }

    pub fn insert(&mut self, text: &str) {
        let canon = canonicalize(text);
        if self.ids.insert(content_hash(&canon)) {
            self.entries
                .push(canon.split_whitespace().map(str::to_string).collect());
        }
    }

    /// True when `text` exactly matches a member or reaches `threshold`
    /// similarity with any member.
    pub fn is_duplicate(&self, text: &str, threshold: f64) -> bool {
        let canon = canonicalize(text);
        if self.ids.contains(&content_hash(&canon)) {
            return true;
        }
        let cand: Vec<String> = canon.split_whitespace().map(str::to_string).collect();
        self.entries.iter().any(|existing| {
            let total = (cand.len() + existing.len()) as f64;
            // LCS cannot exceed the shorter side.
            let bound = if total == 0.0 {
                0.0
            } else {
                2.0 * cand.len().min(existing.len()) as f64 / total
            };
            bound >= threshold && lcs_f1(&cand, existing) >= threshold
        })
    }
}

/// Accepted candidates (canonical text) in input order. Accepted items join
/// the comparison set immediately, so duplicates within the batch are
/// rejected too.
pub fn dedup_filter<'a>(
    candidates: &[String],
    existing: impl IntoIterator<Item = &'a str>,
    threshold: f64,
) -> Vec<String> {
    let mut index = DedupIndex::new(existing);
    let mut accepted = Vec::new();
    for c in candidates {
        if !index.is_duplicate(c, threshold) {
            let canon = canonicalize(c);
            index.insert(&canon);
            accepted.push(canon);
        }
    }
    accepted
}

/// Per-iteration sampling seed derived from the run seed (SplitMix64 of
/// `rng_seed ^ iteration·φ`), so a resumed run samples exactly as an
/// uninterrupted one.
pub fn iteration_seed(rng_seed: u64, iteration: u32) -> u64 {
    let mut z = rng_seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs iterations `1..=m`.
pub fn run_expansion(
    pool: InstructionPool,
    config: &ExpansionConfig,
    stage: u32,
    gateway: &Gateway,
    template: &PromptTemplate,
) -> Result<(InstructionPool, ExpansionReport), ExpansionError> {
    run_expansion_from(
        pool,
        ExpansionReport::default(),
        1,
        config,
        stage,
        gateway,
        template,
        |_, _, _| Ok(()),
    )
}

/// Runs iterations `start..=m`, calling `after_iteration` with the updated
/// pool and report after each one (used for checkpointing).
#[allow(clippy::too_many_arguments)]
pub fn run_expansion_from(
    mut pool: InstructionPool,
    mut report: ExpansionReport,
    start: u32,
    config: &ExpansionConfig,
    stage: u32,
    gateway: &Gateway,
    template: &PromptTemplate,
    mut after_iteration: impl FnMut(u32, &InstructionPool, &ExpansionReport) -> Result<(), String>,
) -> Result<(InstructionPool, ExpansionReport), ExpansionError> {
    config.validate()?;
    if pool.seed_count() == 0 {
        return Err(ExpansionError::NoSeeds);
    }
    if config.k == 0 {
        return Ok((pool, report));
    }
    for t in start.max(1)..=config.m {
        let source = match config.sample_from {
            SampleSource::SeedsOnly => pool.seed_instructions(),
            SampleSource::FullPool => pool.all(),
        };
        let subset = sample_subset(&source, config.n, iteration_seed(config.rng_seed, t));
        let parent_ids: Vec<String> = subset.iter().map(|i| i.id.clone()).collect();
        let mut it = IterationReport {
            iteration: t,
            ..IterationReport::default()
        };

        let candidates = match expand_once(&subset, config.k, gateway, template) {
            Ok(c) => c,
            Err(ExpansionError::ParseFailure) => {
                tracing::warn!(iteration = t, "expander response could not be parsed");
                it.generated = 1;
                it.rejected_parse = 1;
                Vec::new()
            }
            Err(e) => return Err(e),
        };
        it.generated += candidates.len();

        let mut sized = Vec::with_capacity(candidates.len());
        for c in candidates {
            let len = canonicalize(&c).chars().count();
            if len < config.min_len_chars || len > config.max_len_chars {
                it.rejected_length += 1;
            } else {
                sized.push(c);
            }
        }

        let accepted = dedup_filter(&sized, pool.texts(), config.dedup_threshold);
        it.rejected_duplicate = sized.len() - accepted.len();
        for text in accepted {
            let ins =
                Instruction::expanded(&text, parent_ids.clone(), t, stage).expect("accepted candidates are non-empty");
            let admitted = pool.insert_expanded(ins);
            debug_assert!(admitted);
            it.accepted += 1;
        }
        debug_assert!(it.is_balanced());
        report.iterations.push(it);
        after_iteration(t, &pool, &report).map_err(ExpansionError::Hook)?;
    }
    Ok((pool, report))
}
