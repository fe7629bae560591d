//! End-to-end orchestration: expansion, per-instruction grounding and
//! synthesis, the edit flow, checkpoints and resumption.
//!
//! Output files are always written in instruction-id order, so results do
//! not depend on worker scheduling.

mod checkpoint;
mod config;
mod edit;
mod generate;
mod summary;
mod workers;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::editing::EditError;
use crate::expansion::{ExpansionError, ExpansionReport};
use crate::filtering::{assemble_context, filter_contexts, AssembledContext, FilterError, FilterMode};
use crate::gateway::{Clock, Gateway, GatewayError, SystemClock};
use crate::io::JsonlError;
use crate::model::{Instruction, RetrievedContext};
use crate::prompts::{TemplateSet, RANK, REWRITE};
use crate::retrieval::{
    retrieve, rewrite_query, Bm25Retriever, CorpusIndex, DenseRetriever, Document, ExternalApiRetriever,
    ProviderChoice, RetrievalError, Retriever, WebSearchRetriever, INDEX_MAGIC,
};
use crate::seeds::SeedError;
use crate::synthesis::SynthesisError;

pub use checkpoint::{ExpansionProgress, Journal, PipelineCheckpoint, CHECKPOINT_FILE};
pub use config::{
    EditingSettings, PathsConfig, RunConfig, SynthesisSettings, MAX_PARALLELISM, ROLES, ROLE_ANSWERER, ROLE_BASE,
    ROLE_EDITOR, ROLE_EMBEDDER, ROLE_EXPANDER, ROLE_RANKER, ROLE_REWRITER,
};
pub use edit::run_edit;
pub use generate::{run, run_expand};
pub use summary::{aggregate_manifests, dataset_file_name, read_manifest, stage_summary, StageSummary};
pub use workers::run_items;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("resume refused: {0}")]
    ResumeRefused(String),
    #[error("provider exhausted: {0}")]
    ProviderExhausted(String),
    #[error("provider: {0}")]
    Provider(String),
    #[error("io: {0}")]
    Io(String),
    /// Raised by an injected fault; the checkpoint is intact.
    #[error("interrupted: {0}")]
    Interrupted(String),
}

impl PipelineError {
    /// Process exit status: 2 for configuration and usage problems, 3 when
    /// a provider exhausted its retries, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Input(_) | PipelineError::ResumeRefused(_) => 2,
            PipelineError::ProviderExhausted(_) => 3,
            _ => 1,
        }
    }
}

impl From<GatewayError> for PipelineError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::ExhaustedRetries { .. } => PipelineError::ProviderExhausted(e.to_string()),
            e if e.is_config_error() => PipelineError::Config(e.to_string()),
            e => PipelineError::Provider(e.to_string()),
        }
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Io(e.to_string())
    }
}

impl From<JsonlError> for PipelineError {
    fn from(e: JsonlError) -> Self {
        PipelineError::Io(e.to_string())
    }
}

impl From<SeedError> for PipelineError {
    fn from(e: SeedError) -> Self {
        PipelineError::Input(e.to_string())
    }
}

impl From<ExpansionError> for PipelineError {
    fn from(e: ExpansionError) -> Self {
        match e {
            ExpansionError::Gateway(g) => g.into(),
            ExpansionError::Hook(m) => PipelineError::Io(m),
            ExpansionError::NoSeeds => PipelineError::Input(e.to_string()),
            other => PipelineError::Config(other.to_string()),
        }
    }
}

/// Simulated crash points for resume testing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Stop once expansion is checkpointed, before any item runs.
    AfterExpansion,
    /// Stop after this many items have been journaled in this process.
    AfterItems(usize),
}

#[derive(Clone, Default)]
pub struct RunOptions {
    pub resume: bool,
    pub fault: Option<Fault>,
    /// Fixed timestamp for provenance and manifests; wall-clock UTC when unset.
    pub timestamp: Option<String>,
    /// Clock handed to every gateway.
    pub clock: Option<Arc<dyn Clock>>,
}

impl std::fmt::Debug for RunOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunOptions")
            .field("resume", &self.resume)
            .field("fault", &self.fault)
            .field("timestamp", &self.timestamp)
            .finish_non_exhaustive()
    }
}

impl RunOptions {
    pub(crate) fn stamp(&self) -> String {
        self.timestamp
            .clone()
            .unwrap_or_else(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Succeeded,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub attempted: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub skipped: usize,
}

impl PhaseReport {
    pub fn record(&mut self, outcome: Outcome) {
        self.attempted += 1;
        match outcome {
            Outcome::Succeeded => self.succeeded += 1,
            Outcome::Failed => self.failed += 1,
            Outcome::Skipped => self.skipped += 1,
        }
    }

    pub fn is_balanced(&self) -> bool {
        self.attempted == self.succeeded + self.failed + self.skipped
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemIssue {
    pub id: String,
    pub outcome: Outcome,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub stage: u32,
    pub config_hash: String,
    pub seeds: usize,
    pub seeds_dropped: usize,
    pub expansion: ExpansionReport,
    pub pool_size: usize,
    pub synthesis: Option<PhaseReport>,
    pub edit: Option<PhaseReport>,
    /// Dataset records per stage written by this run.
    pub records: BTreeMap<u32, usize>,
    pub preferences: usize,
    pub quarantined: usize,
    /// Failed and skipped items, ordered by id.
    pub issues: Vec<ItemIssue>,
}

impl RunReport {
    /// Deterministic multi-line summary, also written to `run.log`.
    pub fn summary(&self) -> String {
        let mut lines = vec![format!(
            "run_id={} stage={} config_hash={}",
            self.run_id, self.stage, self.config_hash
        )];
        lines.push(format!("seeds loaded={} dropped={}", self.seeds, self.seeds_dropped));
        if !self.expansion.iterations.is_empty() {
            let t = self.expansion.totals();
            lines.push(format!(
                "expansion iterations={} generated={} accepted={} rejected_duplicate={} rejected_length={} rejected_parse={}",
                self.expansion.iterations.len(),
                t.generated,
                t.accepted,
                t.rejected_duplicate,
                t.rejected_length,
                t.rejected_parse
            ));
        }
        if self.pool_size > 0 {
            lines.push(format!("pool size={}", self.pool_size));
        }
        for (name, phase) in [("synthesis", &self.synthesis), ("edit", &self.edit)] {
            if let Some(p) = phase {
                lines.push(format!(
                    "{name} attempted={} succeeded={} failed={} skipped={}",
                    p.attempted, p.succeeded, p.failed, p.skipped
                ));
            }
        }
        for (stage, n) in &self.records {
            lines.push(format!("dataset {} records={n}", dataset_file_name(*stage)));
        }
        if self.edit.is_some() {
            lines.push(format!(
                "preferences={} quarantined={}",
                self.preferences, self.quarantined
            ));
        }
        for issue in &self.issues {
            let outcome = serde_json::to_value(issue.outcome).expect("outcome serializes");
            lines.push(format!(
                "{} {}: {}",
                outcome.as_str().unwrap_or_default(),
                issue.id,
                issue.reason
            ));
        }
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

/// Why one item did not produce output.
#[derive(Debug)]
pub(crate) enum ItemError {
    /// Aborts the phase (bad credentials, broken config).
    Fatal(PipelineError),
    Failed(String),
    Skipped(String),
}

impl From<GatewayError> for ItemError {
    fn from(e: GatewayError) -> Self {
        if e.is_config_error() {
            ItemError::Fatal(e.into())
        } else {
            ItemError::Failed(e.to_string())
        }
    }
}

impl From<RetrievalError> for ItemError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Provider(g) => g.into(),
            RetrievalError::Io(m) => ItemError::Failed(format!("retrieval: {m}")),
            other => ItemError::Fatal(PipelineError::Config(other.to_string())),
        }
    }
}

impl From<FilterError> for ItemError {
    fn from(e: FilterError) -> Self {
        match e {
            FilterError::Gateway(g) => g.into(),
            FilterError::Template(t) => ItemError::Fatal(PipelineError::Config(t.to_string())),
        }
    }
}

impl From<SynthesisError> for ItemError {
    fn from(e: SynthesisError) -> Self {
        match e {
            SynthesisError::Gateway(g) => g.into(),
            SynthesisError::Template(t) => ItemError::Fatal(PipelineError::Config(t.to_string())),
            SynthesisError::EmptyAnswer => ItemError::Failed("empty_answer".into()),
            SynthesisError::Validation(v) => ItemError::Failed(format!("validation: {v}")),
            other => ItemError::Failed(other.to_string()),
        }
    }
}

impl From<EditError> for ItemError {
    fn from(e: EditError) -> Self {
        match e {
            EditError::Gateway(g) => g.into(),
            EditError::Template(t) => ItemError::Fatal(PipelineError::Config(t.to_string())),
            EditError::NoEvidence => ItemError::Skipped("no_evidence".into()),
            EditError::EmptyAnswer => ItemError::Failed("empty_answer".into()),
        }
    }
}

/// Gateways and retriever shared by the per-item workers.
pub(crate) struct Env {
    pub config: RunConfig,
    pub templates: TemplateSet,
    pub gateways: BTreeMap<String, Arc<Gateway>>,
    pub retriever: Option<Box<dyn Retriever>>,
}

impl Env {
    pub fn new(config: RunConfig, templates: TemplateSet) -> Self {
        Self {
            config,
            templates,
            gateways: BTreeMap::new(),
            retriever: None,
        }
    }

    pub fn open_gateway(&mut self, role: &str, clock: &Arc<dyn Clock>) -> Result<Arc<Gateway>, PipelineError> {
        if let Some(gw) = self.gateways.get(role) {
            return Ok(gw.clone());
        }
        let provider = self.config.provider(role)?.clone();
        let gw = Gateway::with_clock(provider, clock.clone())
            .map_err(|e| PipelineError::Config(format!("providers.{role}: {e}")))?;
        let gw = Arc::new(gw);
        self.gateways.insert(role.to_string(), gw.clone());
        Ok(gw)
    }

    pub fn gateway(&self, role: &str) -> &Gateway {
        self.gateways.get(role).expect("gateway opened before use")
    }

    /// Opens the rewriter, the optional ranker and the configured retriever.
    pub fn open_grounding(&mut self, clock: &Arc<dyn Clock>) -> Result<(), PipelineError> {
        let rewriter = self.open_gateway(ROLE_REWRITER, clock)?;
        if self.config.filter.mode == FilterMode::RulesThenLlm {
            let role = if self.config.providers.contains_key(ROLE_RANKER) {
                ROLE_RANKER
            } else {
                ROLE_ANSWERER
            };
            let gw = self.open_gateway(role, clock)?;
            self.gateways.insert(ROLE_RANKER.into(), gw);
        }
        let rc = &self.config.retrieval;
        let retriever: Box<dyn Retriever> = match rc.provider {
            ProviderChoice::LocalBm25 => {
                let index = load_index(&self.config)?;
                Box::new(Bm25Retriever::new(index, rc.bm25_k1, rc.bm25_b))
            }
            ProviderChoice::LocalDense => {
                let index = load_index(&self.config)?;
                let embedder = self.open_gateway(ROLE_EMBEDDER, clock)?;
                Box::new(DenseRetriever::new(index, embedder))
            }
            ProviderChoice::WebSearch => {
                let web = rc
                    .web
                    .clone()
                    .ok_or_else(|| PipelineError::Config("missing [retrieval.web]".into()))?;
                Box::new(
                    WebSearchRetriever::new(web, Some(rewriter)).map_err(|e| PipelineError::Config(e.to_string()))?,
                )
            }
            ProviderChoice::ExternalApi => {
                let api = rc
                    .api
                    .clone()
                    .ok_or_else(|| PipelineError::Config("missing [retrieval.api]".into()))?;
                Box::new(
                    ExternalApiRetriever::new(api, Some(rewriter)).map_err(|e| PipelineError::Config(e.to_string()))?,
                )
            }
        };
        self.retriever = Some(retriever);
        Ok(())
    }

    /// Rewrite, retrieve, filter and assemble evidence for one instruction.
    /// Returns the assembled context and every retrieved context (kept and
    /// dropped) in rank order.
    pub fn gather_evidence(
        &self,
        instruction: &Instruction,
        warnings: &mut Vec<String>,
    ) -> Result<(AssembledContext, Vec<RetrievedContext>), ItemError> {
        let rewrite = rewrite_query(
            instruction,
            self.gateway(ROLE_REWRITER),
            self.templates.get(REWRITE).map_err(fatal)?,
        )?;
        warnings.extend(rewrite.warning);
        let retriever = self.retriever.as_deref().expect("retriever opened before use");
        let hits = retrieve(&rewrite.query, &self.config.retrieval, retriever)?;
        let ranker = self.gateways.get(ROLE_RANKER).map(Arc::as_ref);
        let selection = filter_contexts(
            instruction,
            hits,
            &self.config.filter,
            ranker,
            self.templates.get(RANK).map_err(fatal)?,
        )?;
        warnings.extend(selection.warning);
        let assembled = assemble_context(&selection.kept, self.config.filter.context_token_budget);
        let mut all = selection.kept;
        all.extend(selection.dropped);
        all.sort_by_key(|c| c.rank);
        Ok((assembled, all))
    }
}

pub(crate) fn fatal(e: impl std::fmt::Display) -> ItemError {
    ItemError::Fatal(PipelineError::Config(e.to_string()))
}

pub(crate) fn default_clock(options: &RunOptions) -> Arc<dyn Clock> {
    options
        .clock
        .clone()
        .unwrap_or_else(|| Arc::new(SystemClock::default()))
}

/// Loads the local corpus: a saved index file, or JSONL documents indexed
/// with the configured chunking.
pub fn load_index(config: &RunConfig) -> Result<Arc<CorpusIndex>, PipelineError> {
    let path = config
        .paths
        .corpus
        .as_deref()
        .ok_or_else(|| PipelineError::Config("local retrieval requires paths.corpus".into()))?;
    Ok(Arc::new(load_corpus(
        path,
        config.retrieval.chunk_size_tokens,
        config.retrieval.chunk_overlap_tokens,
    )?))
}

pub fn load_corpus(path: &Path, chunk_size: usize, chunk_overlap: usize) -> Result<CorpusIndex, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
    if bytes.starts_with(INDEX_MAGIC.as_bytes()) {
        return CorpusIndex::load(path).map_err(|e| PipelineError::Input(e.to_string()));
    }
    let text = String::from_utf8(bytes).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
    let docs: Vec<Document> = crate::io::parse_jsonl(path, &text).map_err(|e| PipelineError::Input(e.to_string()))?;
    Ok(CorpusIndex::build(docs, chunk_size, chunk_overlap))
}

/// Opens the checkpoint for a run: a fresh one, or the saved one when
/// resuming (refused when missing or made with a different config).
pub(crate) fn open_checkpoint(
    output_dir: &Path,
    config: &RunConfig,
    config_hash: &str,
    resume: bool,
) -> Result<PipelineCheckpoint, PipelineError> {
    std::fs::create_dir_all(output_dir)
        .map_err(|e| PipelineError::Config(format!("output dir {}: {e}", output_dir.display())))?;
    if !resume {
        return Ok(PipelineCheckpoint::new(&config.run_id, config_hash));
    }
    let saved = PipelineCheckpoint::load(output_dir)?
        .ok_or_else(|| PipelineError::ResumeRefused(format!("no {CHECKPOINT_FILE} in {}", output_dir.display())))?;
    if saved.config_hash != config_hash {
        return Err(PipelineError::ResumeRefused(format!(
            "config changed since the checkpoint was written (checkpoint {}, current {})",
            saved.config_hash, config_hash
        )));
    }
    Ok(saved)
}
