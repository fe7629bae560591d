//! Run configuration: a TOML file with nested tables, paths resolved
//! relative to the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::editing::DEFAULT_MAX_EDIT_RATIO;
use crate::expansion::ExpansionConfig;
use crate::filtering::FilterConfig;
use crate::gateway::ProviderConfig;
use crate::prompts::TemplateSet;
use crate::retrieval::{ProviderChoice, RetrievalConfig};
use crate::synthesis::DEFAULT_MAX_ANSWER_CHARS;

pub const MAX_PARALLELISM: usize = 64;

pub const ROLE_EXPANDER: &str = "expander";
pub const ROLE_REWRITER: &str = "rewriter";
pub const ROLE_ANSWERER: &str = "answerer";
pub const ROLE_BASE: &str = "base";
pub const ROLE_EDITOR: &str = "editor";
/// Optional; falls back to the answerer.
pub const ROLE_RANKER: &str = "ranker";
/// Required only for dense retrieval.
pub const ROLE_EMBEDDER: &str = "embedder";

pub const ROLES: [&str; 7] = [
    ROLE_EXPANDER,
    ROLE_REWRITER,
    ROLE_ANSWERER,
    ROLE_BASE,
    ROLE_EDITOR,
    ROLE_RANKER,
    ROLE_EMBEDDER,
];

fn default_stage() -> u32 {
    1
}
fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub seeds: Option<PathBuf>,
    /// JSONL of `{doc_id, title?, body}` documents, or a saved index file.
    pub corpus: Option<PathBuf>,
    pub edit_seeds: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisSettings {
    pub max_answer_chars: usize,
}

impl Default for SynthesisSettings {
    fn default() -> Self {
        Self {
            max_answer_chars: DEFAULT_MAX_ANSWER_CHARS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditingSettings {
    pub max_edit_ratio: f64,
}

impl Default for EditingSettings {
    fn default() -> Self {
        Self {
            max_edit_ratio: DEFAULT_MAX_EDIT_RATIO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    #[serde(default = "default_stage")]
    pub stage: u32,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub allow_ungrounded: bool,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    pub paths: PathsConfig,
    #[serde(default)]
    pub expansion: Option<ExpansionConfig>,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub synthesis: SynthesisSettings,
    #[serde(default)]
    pub editing: EditingSettings,
    #[serde(default)]
    pub providers: BTreeMap<String, ProviderConfig>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn config_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| config_err(format!("{origin}: {e}")))
    }

    /// Reads a config file and resolves every relative path against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut config = Self::parse(&text, &path.display().to_string())?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.resolve_paths(&base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for opt in [&mut p.seeds, &mut p.corpus, &mut p.edit_seeds, &mut self.templates_dir] {
            if let Some(path) = opt.as_mut() {
                resolve(base, path);
            }
        }
        resolve(base, &mut p.output_dir);
        for provider in self.providers.values_mut() {
            for opt in [&mut provider.cache_dir, &mut provider.script_path] {
                if let Some(path) = opt.as_mut() {
                    resolve(base, path);
                }
            }
        }
    }

    /// Checks the settings shared by every command.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.run_id.trim().is_empty() {
            return Err(config_err("run_id must not be empty"));
        }
        if self.stage < 1 {
            return Err(config_err("stage must be >= 1"));
        }
        if !(1..=MAX_PARALLELISM).contains(&self.parallelism) {
            return Err(config_err(format!("parallelism must be in 1..={MAX_PARALLELISM}")));
        }
        if let Some(unknown) = self.providers.keys().find(|r| !ROLES.contains(&r.as_str())) {
            return Err(config_err(format!(
                "unknown provider role {unknown:?} (expected one of {})",
                ROLES.join(", ")
            )));
        }
        for (role, p) in &self.providers {
            p.validate().map_err(|e| config_err(format!("providers.{role}: {e}")))?;
        }
        if let Some(e) = &self.expansion {
            e.validate().map_err(|e| config_err(e.to_string()))?;
        }
        self.retrieval.validate().map_err(|e| config_err(e.to_string()))?;
        self.filter.validate().map_err(config_err)?;
        if self.synthesis.max_answer_chars == 0 {
            return Err(config_err("synthesis.max_answer_chars must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.editing.max_edit_ratio) {
            return Err(config_err("editing.max_edit_ratio must be in [0, 1]"));
        }
        if self.retrieval.provider == ProviderChoice::LocalDense && !self.providers.contains_key(ROLE_EMBEDDER) {
            return Err(config_err("local_dense retrieval requires [providers.embedder]"));
        }
        Ok(())
    }

    pub fn provider(&self, role: &str) -> Result<&ProviderConfig, PipelineError> {
        self.providers
            .get(role)
            .ok_or_else(|| config_err(format!("missing [providers.{role}]")))
    }

    pub fn templates(&self) -> Result<TemplateSet, PipelineError> {
        match &self.templates_dir {
            Some(dir) => TemplateSet::load_dir(dir).map_err(|e| config_err(e.to_string())),
            None => Ok(TemplateSet::builtin()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hash of every setting and input that can change the outputs.
    /// Parallelism, paths, retry/rate/cache settings and the run id are
    /// excluded; input files and mock scripts are covered by content.
    pub fn config_hash(&self, templates: &TemplateSet) -> Result<String, PipelineError> {
        let mut value = serde_json::to_value(self).map_err(|e| config_err(e.to_string()))?;
        let obj = value.as_object_mut().expect("config is a table");
        for key in ["run_id", "parallelism", "templates_dir", "paths"] {
            obj.remove(key);
        }
        if let Some(Value::Object(providers)) = obj.get_mut("providers") {
            for p in providers.values_mut() {
                if let Value::Object(p) = p {
                    for key in [
                        "api_key_env",
                        "max_attempts",
                        "backoff_base_ms",
                        "requests_per_minute",
                        "cache_dir",
                        "timeout_secs",
                        "script_path",
                    ] {
                        p.remove(key);
                    }
                }
            }
        }
        let mut inputs = serde_json::Map::new();
        let p = &self.paths;
        for (name, path) in [
            ("seeds", &p.seeds),
            ("corpus", &p.corpus),
            ("edit_seeds", &p.edit_seeds),
        ] {
            if let Some(path) = path {
                inputs.insert(name.into(), Value::String(file_digest(path)?));
            }
        }
        for (role, provider) in &self.providers {
            if let Some(script) = &provider.script {
                let json = serde_json::to_string(script.as_ref()).expect("script serializes");
                inputs.insert(
                    format!("script.{role}"),
                    Value::String(hex::encode(Sha256::digest(json))),
                );
            } else if let Some(path) = &provider.script_path {
                inputs.insert(format!("script.{role}"), Value::String(file_digest(path)?));
            }
        }
        obj.insert("inputs".into(), Value::Object(inputs));
        let templates: serde_json::Map<String, Value> = templates
            .iter()
            .map(|t| (t.id.clone(), serde_json::to_value(t).expect("template serializes")))
            .collect();
        obj.insert("templates".into(), Value::Object(templates));
        Ok(hex::encode(Sha256::digest(value.to_string())))
    }
}

fn file_digest(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
run_id = "t"
[paths]
seeds = "seeds.jsonl"
output_dir = "out"
[expansion]
m = 2
[providers.expander]
kind = "mock"
script_path = "mock.json"
"#;

    #[test]
    fn defaults_and_path_resolution() {
        let mut c = RunConfig::parse(MINIMAL, "test").unwrap();
        c.resolve_paths(Path::new("/cfg"));
        assert_eq!(c.paths.seeds.as_deref(), Some(Path::new("/cfg/seeds.jsonl")));
        assert_eq!(c.paths.output_dir, PathBuf::from("/cfg/out"));
        assert_eq!(
            c.providers["expander"].script_path.as_deref(),
            Some(Path::new("/cfg/mock.json"))
        );
        assert_eq!(c.stage, 1);
        assert_eq!(c.parallelism, 4);
        assert_eq!(c.expansion.as_ref().unwrap().k, 4);
        assert_eq!(c.editing.max_edit_ratio, 0.5);
        c.validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut c = RunConfig::parse(MINIMAL, "test").unwrap();
        c.parallelism = MAX_PARALLELISM + 1;
        assert!(c.validate().is_err());
        let mut c = RunConfig::parse(MINIMAL, "test").unwrap();
        c.providers.insert("judge".into(), ProviderConfig::mock());
        assert!(c.validate().is_err());
        assert!(RunConfig::parse("run_id = 1", "x").is_err());
        assert!(RunConfig::parse(&format!("{MINIMAL}\nbogus = 1"), "x").is_err());
    }

    #[test]
    fn hash_ignores_parallelism_but_not_settings() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("seeds.jsonl"), "{}\n").unwrap();
        std::fs::write(dir.path().join("mock.json"), "{}").unwrap();
        let mut a = RunConfig::parse(MINIMAL, "test").unwrap();
        a.resolve_paths(dir.path());
        let t = TemplateSet::builtin();
        let h = a.config_hash(&t).unwrap();
        let mut b = a.clone();
        b.parallelism = 9;
        b.run_id = "other".into();
        assert_eq!(b.config_hash(&t).unwrap(), h);
        b.expansion.as_mut().unwrap().rng_seed = 7;
        assert_ne!(b.config_hash(&t).unwrap(), h);
        std::fs::write(dir.path().join("seeds.jsonl"), "{ }\n").unwrap();
        assert_ne!(a.config_hash(&t).unwrap(), h);
    }

    #[test]
    fn effective_config_round_trips() {
        let c = RunConfig::parse(MINIMAL, "test").unwrap();
        assert_eq!(RunConfig::parse(&c.to_toml(), "echo").unwrap(), c);
    }
}
