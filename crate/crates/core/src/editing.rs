//! Minimal-edit preference triples: baseline answer, evidence-driven
//! revision, and the edit-ratio gate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filtering::AssembledContext;
use crate::gateway::{Gateway, GatewayError};
use crate::model::{canonicalize, Instruction, PreferenceTriple};
use crate::prompts::{PromptTemplate, TemplateError};

pub const DEFAULT_MAX_EDIT_RATIO: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EditError {
    #[error("model returned an empty answer")]
    EmptyAnswer,
    #[error("no evidence to revise against")]
    NoEvidence,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Asks the base model the bare instruction; the reply becomes the rejected answer.
pub fn capture_baseline(
    instruction: &Instruction,
    base: &Gateway,
    template: &PromptTemplate,
) -> Result<String, EditError> {
    let request = template.render(&[("instruction", &instruction.text)])?;
    let text = base.complete(&request)?.text.trim().to_string();
    if text.is_empty() {
        return Err(EditError::EmptyAnswer);
    }
    Ok(text)
}

/// Asks the editor to minimally revise `rejected` against the evidence.
pub fn revise_answer(
    instruction: &Instruction,
    rejected: &str,
    context: &AssembledContext,
    editor: &Gateway,
    template: &PromptTemplate,
) -> Result<String, EditError> {
    if context.is_empty() {
        return Err(EditError::NoEvidence);
    }
    if rejected.trim().is_empty() {
        return Err(EditError::EmptyAnswer);
    }
    let request = template.render(&[
        ("instruction", &instruction.text),
        ("rejected", rejected),
        ("context", &context.text),
    ])?;
    let text = editor.complete(&request)?.text.trim().to_string();
    if text.is_empty() {
        return Err(EditError::EmptyAnswer);
    }
    Ok(text)
}

fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let next = if x == y {
                diag
            } else {
                1 + diag.min(row[j]).min(row[j + 1])
            };
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

/// Token-level Levenshtein distance over whitespace tokens, divided by the
/// longer token count. Two empty texts have ratio 0.
pub fn edit_ratio(rejected: &str, chosen: &str) -> f64 {
    let a: Vec<&str> = rejected.split_whitespace().collect();
    let b: Vec<&str> = chosen.split_whitespace().collect();
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 0.0;
    }
    levenshtein(&a, &b) as f64 / longest as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuarantineFlag {
    OverRatio,
    NoChangeNeeded,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TripleOutcome {
    Accepted(PreferenceTriple),
    Quarantined(PreferenceTriple, QuarantineFlag),
}

impl TripleOutcome {
    pub fn triple(&self) -> &PreferenceTriple {
        match self {
            TripleOutcome::Accepted(t) | TripleOutcome::Quarantined(t, _) => t,
        }
    }
}

/// Routes a triple to the main file or to quarantine. Unchanged answers
/// and edits above `max_ratio` are quarantined.
pub fn emit_triple(
    instruction: &Instruction,
    rejected: &str,
    chosen: &str,
    context_ids: Vec<String>,
    max_ratio: f64,
) -> TripleOutcome {
    let unchanged = canonicalize(rejected) == canonicalize(chosen);
    let triple = PreferenceTriple {
        instruction: instruction.clone(),
        rejected: rejected.to_string(),
        chosen: chosen.to_string(),
        edit_ratio: edit_ratio(rejected, chosen),
        context_ids,
        no_change_needed: unchanged,
    };
    if unchanged {
        TripleOutcome::Quarantined(triple, QuarantineFlag::NoChangeNeeded)
    } else if triple.edit_ratio > max_ratio {
        TripleOutcome::Quarantined(triple, QuarantineFlag::OverRatio)
    } else {
        TripleOutcome::Accepted(triple)
    }
}

/// Main preference file line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceRecord {
    pub prompt: String,
    pub rejected: String,
    pub chosen: String,
    pub edit_ratio: f64,
    pub context_ids: Vec<String>,
}

/// Quarantine file line: the preference schema plus a flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuarantineRecord {
    pub prompt: String,
    pub rejected: String,
    pub chosen: String,
    pub edit_ratio: f64,
    pub context_ids: Vec<String>,
    pub flag: QuarantineFlag,
}

impl From<&PreferenceTriple> for PreferenceRecord {
    fn from(t: &PreferenceTriple) -> Self {
        Self {
            prompt: t.instruction.text.clone(),
            rejected: t.rejected.clone(),
            chosen: t.chosen.clone(),
            edit_ratio: t.edit_ratio,
            context_ids: t.context_ids.clone(),
        }
    }
}

impl QuarantineRecord {
    pub fn new(t: &PreferenceTriple, flag: QuarantineFlag) -> Self {
        let p = PreferenceRecord::from(t);
        Self {
            prompt: p.prompt,
            rejected: p.rejected,
            chosen: p.chosen,
            edit_ratio: p.edit_ratio,
            context_ids: p.context_ids,
            flag,
        }
    }
}
