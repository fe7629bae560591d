//! Prompt templates: TOML files with `{placeholder}` substitution.
//!
//! A template file looks like
//!
//! ```toml
//! id = "rewrite"
//! temperature = 0.2
//! max_output_tokens = 64
//! system = "..."
//! user = "... {instruction} ..."
//! ```
//!
//! `{name}` is replaced by the named value; `{{` and `}}` produce literal
//! braces. Built-in defaults are used for any id not found in the
//! configured templates directory.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::ChatRequest;

pub const EXPAND: &str = "expand";
pub const REWRITE: &str = "rewrite";
pub const RANK: &str = "rank";
pub const ANSWER: &str = "answer";
pub const BASELINE: &str = "baseline";
pub const EDIT: &str = "edit";

const BUILTIN: &[(&str, &str)] = &[
    (EXPAND, include_str!("../templates/expand.toml")),
    (REWRITE, include_str!("../templates/rewrite.toml")),
    (RANK, include_str!("../templates/rank.toml")),
    (ANSWER, include_str!("../templates/answer.toml")),
    (BASELINE, include_str!("../templates/baseline.toml")),
    (EDIT, include_str!("../templates/edit.toml")),
];

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {id}: no value for placeholder {{{name}}}")]
    MissingValue { id: String, name: String },
    #[error("template {id}: unterminated placeholder")]
    Unterminated { id: String },
    #[error("template file {path}: {message}")]
    Load { path: String, message: String },
    #[error("unknown template id {0}")]
    Unknown(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub system: String,
    pub user: String,
}

impl PromptTemplate {
    pub fn parse(text: &str, origin: &str) -> Result<Self, TemplateError> {
        toml::from_str(text).map_err(|e| TemplateError::Load {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    /// Renders both prompts into a request at the template's temperature.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<ChatRequest, TemplateError> {
        Ok(ChatRequest {
            template_id: self.id.clone(),
            system_prompt: substitute(&self.id, self.system.trim(), values)?,
            user_prompt: substitute(&self.id, self.user.trim(), values)?,
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            seed_hint: None,
        })
    }
}

fn substitute(id: &str, text: &str, values: &[(&str, &str)]) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        match c {
            '{' if matches!(chars.peek(), Some((_, '{'))) => {
                chars.next();
                out.push('{');
            }
            '}' if matches!(chars.peek(), Some((_, '}'))) => {
                chars.next();
                out.push('}');
            }
            '{' => {
                let rest = &text[i + 1..];
                let end = rest
                    .find('}')
                    .ok_or_else(|| TemplateError::Unterminated { id: id.into() })?;
                let name = &rest[..end];
                let value = values
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| TemplateError::MissingValue {
                        id: id.into(),
                        name: name.into(),
                    })?;
                out.push_str(value);
                for _ in 0..name.chars().count() + 1 {
                    chars.next();
                }
            }
            _ => out.push(c),
        }
    }
    Ok(out)
}

/// All templates the pipeline uses, keyed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    templates: BTreeMap<String, PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(id, text)| {
                let t = PromptTemplate::parse(text, id).expect("built-in template parses");
                (id.to_string(), t)
            })
            .collect();
        Self { templates }
    }

    /// Built-ins overridden by every `<id>.toml` present in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        for (id, _) in BUILTIN {
            let path = dir.join(format!("{id}.toml"));
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| TemplateError::Load {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                let mut t = PromptTemplate::parse(&text, &path.display().to_string())?;
                t.id = id.to_string();
                set.templates.insert(id.to_string(), t);
            }
        }
        Ok(set)
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate, TemplateError> {
        self.templates.get(id).ok_or_else(|| TemplateError::Unknown(id.into()))
    }

    pub fn insert(&mut self, template: PromptTemplate) {
        self.templates.insert(template.id.clone(), template);
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.values()
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}
