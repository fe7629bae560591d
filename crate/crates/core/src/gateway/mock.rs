use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ChatRequest, Completion, Transport, TransportError};
use crate::model::{content_hash, token_count};

/// Prefix of the reply given to prompts the script does not cover.
pub const UNSCRIPTED_PREFIX: &str = "MOCK-UNSCRIPTED:";

const DEFAULT_EMBEDDING_DIM: usize = 64;

/// Scripted behaviour for the mock provider.
///
/// Lookup order for a chat request: `responses[prompt_hash]`, then the
/// first entry of `matches` whose template matches and whose needle occurs in
/// the user prompt, then `rules[template_id]`, then the unscripted fallback.
/// Rule patterns may use
/// `{user}`, `{system}`, `{template}`, `{hash}` and `{hash0}`…`{hash7}`
/// (8-hex-char slices of the prompt hash).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub responses: BTreeMap<String, MockReply>,
    #[serde(default)]
    pub matches: Vec<MockMatch>,
    #[serde(default)]
    pub rules: BTreeMap<String, String>,
    #[serde(default)]
    pub embedding_dim: Option<usize>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| e.to_string())
    }
}

/// Content-keyed reply, for prompts whose exact text is not known up front.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockMatch {
    pub template: String,
    pub contains: String,
    pub reply: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockReply {
    Text(String),
    /// Successive calls with the same prompt consume successive steps; the
    /// last step repeats once the sequence is exhausted.
    Sequence(Vec<MockStep>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockStep {
    Text(String),
    Status { status: u16 },
    Timeout { timeout: bool },
    Malformed { malformed: bool },
}

pub struct MockTransport {
    script: MockScript,
    calls: Mutex<HashMap<String, usize>>,
}

impl MockTransport {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            calls: Mutex::new(HashMap::new()),
        }
    }

    fn next_step(&self, hash: &str, steps: &[MockStep]) -> MockStep {
        let mut calls = self.calls.lock().unwrap_or_else(|e| e.into_inner());
        let n = calls.entry(hash.to_string()).or_insert(0);
        let step = steps
            .get(*n)
            .or_else(|| steps.last())
            .cloned()
            .unwrap_or(MockStep::Text(String::new()));
        *n += 1;
        step
    }
}

fn render_rule(pattern: &str, request: &ChatRequest, hash: &str) -> String {
    let mut out = pattern
        .replace("{user}", &request.user_prompt)
        .replace("{system}", &request.system_prompt)
        .replace("{template}", &request.template_id)
        .replace("{hash}", hash);
    for i in 0..8 {
        out = out.replace(&format!("{{hash{i}}}"), &hash[i * 8..(i + 1) * 8]);
    }
    out
}

impl Transport for MockTransport {
    fn chat(&self, request: &ChatRequest, _model: &str) -> Result<Completion, TransportError> {
        let hash = request.prompt_hash();
        let step = match self.script.responses.get(&hash) {
            Some(MockReply::Text(text)) => MockStep::Text(text.clone()),
            Some(MockReply::Sequence(steps)) => self.next_step(&hash, steps),
            None => {
                let matched = self
                    .script
                    .matches
                    .iter()
                    .find(|m| m.template == request.template_id && request.user_prompt.contains(&m.contains));
                match (matched, self.script.rules.get(&request.template_id)) {
                    (Some(m), _) => MockStep::Text(m.reply.clone()),
                    (None, Some(pattern)) => MockStep::Text(render_rule(pattern, request, &hash)),
                    (None, None) => MockStep::Text(format!("{UNSCRIPTED_PREFIX}{hash}")),
                }
            }
        };
        let input_tokens = (token_count(&request.system_prompt) + token_count(&request.user_prompt)) as u64;
        match step {
            MockStep::Text(text) => Ok(Completion {
                output_tokens: token_count(&text) as u64,
                text: Some(text),
                input_tokens,
            }),
            MockStep::Status { status } => match status {
                401 | 403 => Err(TransportError::Auth(status)),
                429 | 500..=599 => Err(TransportError::Transient(format!("HTTP {status}"))),
                other => Err(TransportError::Fatal(format!("HTTP {other}"))),
            },
            MockStep::Timeout { .. } => Err(TransportError::Transient("timed out".into())),
            MockStep::Malformed { .. } => Ok(Completion {
                text: None,
                input_tokens,
                output_tokens: 0,
            }),
        }
    }

    fn embed(&self, texts: &[String], _model: &str) -> Result<Vec<Vec<f64>>, TransportError> {
        let dim = self.script.embedding_dim.unwrap_or(DEFAULT_EMBEDDING_DIM).max(1);
        Ok(texts.iter().map(|t| mock_embedding(t, dim)).collect())
    }
}

/// Deterministic unit vector seeded by the text's content hash.
pub(crate) fn mock_embedding(text: &str, dim: usize) -> Vec<f64> {
    let digest = hex::decode(content_hash(text)).expect("hex digest");
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{script_mock, Gateway};

    fn req(template: &str, user: &str) -> ChatRequest {
        ChatRequest {
            template_id: template.into(),
            system_prompt: "system".into(),
            user_prompt: user.into(),
            temperature: 0.0,
            max_output_tokens: 16,
            seed_hint: None,
        }
    }

    #[test]
    fn unscripted_prompt_gets_hash_fallback() {
        let gw = Gateway::new(script_mock(BTreeMap::new())).unwrap();
        let r = req("t", "anything");
        let resp = gw.complete(&r).unwrap();
        assert_eq!(resp.text, format!("{UNSCRIPTED_PREFIX}{}", r.prompt_hash()));
    }

    #[test]
    fn scripted_entries_are_returned_verbatim() {
        let a = req("expand", "P");
        let b = req("expand", "Q");
        let mut table = BTreeMap::new();
        table.insert(a.prompt_hash(), "four new questions".to_string());
        table.insert(b.prompt_hash(), "other".to_string());
        assert_eq!(table.len(), 2, "script keys collided");
        let gw = Gateway::new(script_mock(table)).unwrap();
        assert_eq!(gw.complete(&a).unwrap().text, "four new questions");
        assert_eq!(gw.complete(&b).unwrap().text, "other");
    }

    #[test]
    fn rules_substitute_placeholders() {
        let mut script = MockScript::default();
        script.rules.insert("echo".into(), "<{user}> {hash0}".into());
        let gw = Gateway::new(crate::gateway::ProviderConfig::mock().with_script(script)).unwrap();
        let r = req("echo", "hi there");
        let text = gw.complete(&r).unwrap().text;
        assert_eq!(text, format!("<hi there> {}", &r.prompt_hash()[..8]));
    }

    #[test]
    fn matches_take_precedence_over_rules() {
        let mut script = MockScript::default();
        script.rules.insert("edit".into(), "rule".into());
        script.matches.push(MockMatch {
            template: "edit".into(),
            contains: "president".into(),
            reply: "matched".into(),
        });
        let gw = Gateway::new(crate::gateway::ProviderConfig::mock().with_script(script)).unwrap();
        assert_eq!(
            gw.complete(&req("edit", "who is president now")).unwrap().text,
            "matched"
        );
        assert_eq!(gw.complete(&req("edit", "unrelated")).unwrap().text, "rule");
        assert!(gw
            .complete(&req("other", "president"))
            .unwrap()
            .text
            .starts_with(UNSCRIPTED_PREFIX));
    }

    #[test]
    fn script_file_parses_all_step_kinds() {
        let json = r#"{
            "responses": {
                "abc": "plain",
                "def": ["", {"status": 429}, {"timeout": true}, {"malformed": true}, "ok"]
            },
            "rules": {"answer": "Answer {hash0}"},
            "embedding_dim": 8
        }"#;
        let script: MockScript = serde_json::from_str(json).unwrap();
        assert_eq!(script.responses.len(), 2);
        match &script.responses["def"] {
            MockReply::Sequence(steps) => {
                assert_eq!(steps[1], MockStep::Status { status: 429 });
                assert_eq!(steps[2], MockStep::Timeout { timeout: true });
                assert_eq!(steps[3], MockStep::Malformed { malformed: true });
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(mock_embedding("x", 8).len(), 8);
    }
}
