//! Grounded answer generation and the SFT dataset formats.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filtering::AssembledContext;
use crate::gateway::{ChatResponse, Gateway, GatewayError};
use crate::io::{append_line_atomic_with, read_jsonl, write_jsonl, JsonlError};
use crate::model::{canonicalize, Instruction, Provenance, SftRecord, TokenUsage};
use crate::prompts::{PromptTemplate, TemplateError};

/// Placeholder passed to the answer template when no evidence survived.
pub const NO_EVIDENCE: &str = "(no evidence available)";

pub const DEFAULT_MAX_ANSWER_CHARS: usize = 8000;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("model returned an empty answer twice")]
    EmptyAnswer,
    #[error("record rejected: {0}")]
    Validation(ValidationFailure),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationFailure {
    Echo,
    Overlength,
    Empty,
}

impl std::fmt::Display for ValidationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ValidationFailure::Echo => "answer repeats the instruction",
            ValidationFailure::Overlength => "answer exceeds the length limit",
            ValidationFailure::Empty => "answer is empty",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedAnswer {
    pub text: String,
    pub response: ChatResponse,
    pub template_id: String,
    /// Set when the first reply was empty and a hotter retry produced this one.
    pub temperature_bumped: bool,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// Generates an answer from the instruction and its assembled evidence. An
/// empty reply is retried once at `temperature + 0.3` (capped at 1.0).
pub fn generate_answer(
    instruction: &Instruction,
    context: &AssembledContext,
    gateway: &Gateway,
    template: &PromptTemplate,
) -> Result<GeneratedAnswer, SynthesisError> {
    let evidence = if context.is_empty() {
        NO_EVIDENCE
    } else {
        context.text.as_str()
    };
    let request = template.render(&[("instruction", &instruction.text), ("context", evidence)])?;
    let first = gateway.complete(&request)?;
    let (mut tokens_in, mut tokens_out) = (first.input_tokens, first.output_tokens);
    if !first.text.trim().is_empty() {
        return Ok(GeneratedAnswer {
            text: first.text.trim().to_string(),
            template_id: template.id.clone(),
            temperature_bumped: false,
            input_tokens: tokens_in,
            output_tokens: tokens_out,
            response: first,
        });
    }
    let mut hotter = request.clone();
    hotter.temperature = (request.temperature + 0.3).min(1.0).max(request.temperature);
    let second = gateway.complete(&hotter)?;
    tokens_in += second.input_tokens;
    tokens_out += second.output_tokens;
    if second.text.trim().is_empty() {
        return Err(SynthesisError::EmptyAnswer);
    }
    Ok(GeneratedAnswer {
        text: second.text.trim().to_string(),
        template_id: template.id.clone(),
        temperature_bumped: true,
        input_tokens: tokens_in,
        output_tokens: tokens_out,
        response: second,
    })
}

pub fn validate_answer(instruction: &Instruction, answer: &str, max_chars: usize) -> Result<(), ValidationFailure> {
    let canon = canonicalize(answer);
    if canon.is_empty() {
        return Err(ValidationFailure::Empty);
    }
    if canon == canonicalize(&instruction.text) {
        return Err(ValidationFailure::Echo);
    }
    if answer.chars().count() > max_chars {
        return Err(ValidationFailure::Overlength);
    }
    Ok(())
}

/// Builds a validated record. `grounded` is false when no context was used.
pub fn emit_record(
    instruction: &Instruction,
    answer: &GeneratedAnswer,
    used_context_ids: Vec<String>,
    timestamp: String,
    max_chars: usize,
) -> Result<SftRecord, SynthesisError> {
    validate_answer(instruction, &answer.text, max_chars).map_err(SynthesisError::Validation)?;
    Ok(SftRecord {
        instruction: instruction.clone(),
        answer: answer.text.clone(),
        grounded: !used_context_ids.is_empty(),
        context_ids: used_context_ids,
        provenance: Provenance {
            provider: answer.response.provider.clone(),
            model: answer.response.model.clone(),
            template_id: answer.template_id.clone(),
            timestamp,
            tokens: TokenUsage {
                input_tokens: answer.input_tokens,
                output_tokens: answer.output_tokens,
            },
        },
    })
}

/// Appends one record to a JSONL file via write-temp-then-rename.
pub fn append_record(path: &Path, record: &SftRecord) -> io::Result<()> {
    append_record_with(path, record, || Ok(()))
}

pub fn append_record_with(
    path: &Path,
    record: &SftRecord,
    before_rename: impl FnOnce() -> io::Result<()>,
) -> io::Result<()> {
    let line = serde_json::to_string(record).map_err(io::Error::other)?;
    append_line_atomic_with(path, &line, before_rename)
}

/// Flat SFT pair; the per-stage dataset file format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub instruction: String,
    pub output: String,
    pub stage: u32,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatRecord {
    pub messages: Vec<ChatMessage>,
}

impl From<&SftRecord> for PairRecord {
    fn from(r: &SftRecord) -> Self {
        Self {
            instruction: r.instruction.text.clone(),
            output: r.answer.clone(),
            stage: r.instruction.stage,
            id: r.instruction.id.clone(),
        }
    }
}

impl From<&PairRecord> for ChatRecord {
    fn from(p: &PairRecord) -> Self {
        Self {
            messages: vec![
                ChatMessage {
                    role: "user".into(),
                    content: p.instruction.clone(),
                },
                ChatMessage {
                    role: "assistant".into(),
                    content: p.output.clone(),
                },
            ],
        }
    }
}

impl ChatRecord {
    /// (instruction, answer) when the record is a user/assistant exchange.
    pub fn pair(&self) -> Option<(&str, &str)> {
        match self.messages.as_slice() {
            [u, a] if u.role == "user" && a.role == "assistant" => Some((&u.content, &a.content)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    PairsJsonl,
    ChatJsonl,
}

impl std::str::FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pairs" | "pairs_jsonl" => Ok(ExportFormat::PairsJsonl),
            "chat" | "chat_jsonl" => Ok(ExportFormat::ChatJsonl),
            other => Err(format!("unknown export format {other:?} (expected pairs or chat)")),
        }
    }
}

fn sorted_pairs(records: &[PairRecord]) -> Vec<&PairRecord> {
    let mut sorted: Vec<&PairRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id).then(a.stage.cmp(&b.stage)));
    sorted
}

/// Writes `records` ordered by id in the requested shape.
pub fn export_dataset(records: &[PairRecord], format: ExportFormat, path: &Path) -> Result<(), SynthesisError> {
    let sorted = sorted_pairs(records);
    match format {
        ExportFormat::PairsJsonl => write_jsonl(path, sorted)?,
        ExportFormat::ChatJsonl => write_jsonl(path, sorted.into_iter().map(ChatRecord::from))?,
    }
    Ok(())
}

pub fn import_pairs(path: &Path) -> Result<Vec<PairRecord>, SynthesisError> {
    Ok(read_jsonl(path)?)
}

pub fn import_chat(path: &Path) -> Result<Vec<ChatRecord>, SynthesisError> {
    Ok(read_jsonl(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage_counts: BTreeMap<u32, usize>,
    pub total: usize,
    pub created_at: String,
    pub config_hash: String,
}

impl Manifest {
    pub fn from_counts(stage_counts: BTreeMap<u32, usize>, created_at: String, config_hash: String) -> Self {
        let total = stage_counts.values().sum();
        Self {
            stage_counts,
            total,
            created_at,
            config_hash,
        }
    }
}
