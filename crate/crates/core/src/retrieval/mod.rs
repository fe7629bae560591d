//! Evidence retrieval: query rewriting plus local (BM25 / dense), web
//! search, and external API sources behind one [`Retriever`] trait.

mod chunk;
mod dense;
mod index;
mod remote;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError};
use crate::model::{Instruction, RetrievedContext, SourceKind, SourceRef};
use crate::prompts::{PromptTemplate, TemplateError};

pub use chunk::{chunk_document, chunk_windows};
pub use dense::DenseRetriever;
pub use index::{
    analyze, idf, term_weight, Chunk, CorpusIndex, Document, IndexStats, Posting, INDEX_MAGIC, INDEX_VERSION,
};
pub use remote::{
    json_path, ExternalApiConfig, ExternalApiRetriever, HttpFetch, UreqFetch, WebSearchConfig, WebSearchRetriever,
};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("no corpus index has been built")]
    IndexNotBuilt,
    #[error("index file: {0}")]
    IndexFormat(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Provider(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("invalid retrieval config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderChoice {
    #[default]
    LocalBm25,
    LocalDense,
    WebSearch,
    ExternalApi,
}

fn default_top_k() -> usize {
    5
}
fn default_chunk_size() -> usize {
    256
}
fn default_chunk_overlap() -> usize {
    32
}
fn default_k1() -> f64 {
    1.2
}
fn default_b() -> f64 {
    0.75
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    #[serde(default)]
    pub provider: ProviderChoice,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_chunk_size")]
    pub chunk_size_tokens: usize,
    #[serde(default = "default_chunk_overlap")]
    pub chunk_overlap_tokens: usize,
    #[serde(default = "default_k1")]
    pub bm25_k1: f64,
    #[serde(default = "default_b")]
    pub bm25_b: f64,
    #[serde(default)]
    pub web: Option<WebSearchConfig>,
    #[serde(default)]
    pub api: Option<ExternalApiConfig>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            provider: ProviderChoice::default(),
            top_k: default_top_k(),
            chunk_size_tokens: default_chunk_size(),
            chunk_overlap_tokens: default_chunk_overlap(),
            bm25_k1: default_k1(),
            bm25_b: default_b(),
            web: None,
            api: None,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        let err = |m: &str| Err(RetrievalError::Config(m.into()));
        if self.top_k < 1 {
            return err("top_k must be >= 1");
        }
        if self.chunk_overlap_tokens >= self.chunk_size_tokens {
            return err("chunk_overlap_tokens must be < chunk_size_tokens");
        }
        if self.bm25_k1 <= 0.0 || !(0.0..=1.0).contains(&self.bm25_b) {
            return err("bm25_k1 must be > 0 and bm25_b in [0, 1]");
        }
        match self.provider {
            ProviderChoice::WebSearch if self.web.is_none() => err("web_search provider requires [retrieval.web]"),
            ProviderChoice::ExternalApi if self.api.is_none() => err("external_api provider requires [retrieval.api]"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchQuery {
    pub instruction_id: String,
    pub text: String,
    pub rewriter_template_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewriteOutcome {
    pub query: SearchQuery,
    /// Set when the model reply was empty and the instruction text was used.
    pub warning: Option<String>,
}

/// Rewrites an instruction into a search query: the first non-empty line of
/// the rewriter's reply, or the instruction itself if the reply is empty.
pub fn rewrite_query(
    instruction: &Instruction,
    gateway: &Gateway,
    template: &PromptTemplate,
) -> Result<RewriteOutcome, RetrievalError> {
    let request = template.render(&[("instruction", &instruction.text)])?;
    let response = gateway.complete(&request)?;
    let line = response.text.lines().map(str::trim).find(|l| !l.is_empty());
    let (text, warning) = match line {
        Some(l) => (l.to_string(), None),
        None => {
            let w = format!(
                "empty rewrite for {}; searching with the instruction text",
                instruction.id
            );
            tracing::warn!("{w}");
            (instruction.text.clone(), Some(w))
        }
    };
    Ok(RewriteOutcome {
        query: SearchQuery {
            instruction_id: instruction.id.clone(),
            text,
            rewriter_template_id: template.id.clone(),
        },
        warning,
    })
}

/// A source of evidence. Results are rank-ordered (rank 1 first) with
/// non-increasing scores; an empty result is not an error.
pub trait Retriever: Send + Sync {
    fn retrieve(&self, query: &SearchQuery, top_k: usize) -> Result<Vec<RetrievedContext>, RetrievalError>;
}

/// Lexical retrieval over a [`CorpusIndex`]. Chunks sharing no term with
/// the query are never returned.
pub struct Bm25Retriever {
    index: Option<Arc<CorpusIndex>>,
    k1: f64,
    b: f64,
}

impl Bm25Retriever {
    pub fn new(index: Arc<CorpusIndex>, k1: f64, b: f64) -> Self {
        Self {
            index: Some(index),
            k1,
            b,
        }
    }

    /// A retriever with no index; every call fails with `IndexNotBuilt`.
    pub fn unbuilt() -> Self {
        Self {
            index: None,
            k1: default_k1(),
            b: default_b(),
        }
    }
}

/// Unique analyzed query terms in first-occurrence order.
pub fn query_terms(text: &str) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    analyze(text).into_iter().filter(|t| seen.insert(t.clone())).collect()
}

pub(crate) fn local_context(instruction_id: &str, chunk: &Chunk, score: f64, rank: u32) -> RetrievedContext {
    RetrievedContext::new(
        instruction_id,
        chunk.text.clone(),
        SourceRef {
            kind: SourceKind::LocalCorpus,
            locator: format!("{}#{}", chunk.doc_id, chunk.chunk_id),
        },
        score,
        rank,
    )
}

impl Retriever for Bm25Retriever {
    fn retrieve(&self, query: &SearchQuery, top_k: usize) -> Result<Vec<RetrievedContext>, RetrievalError> {
        let index = self.index.as_ref().ok_or(RetrievalError::IndexNotBuilt)?;
        let terms = query_terms(&query.text);
        Ok(index
            .search(&terms, top_k, self.k1, self.b)
            .into_iter()
            .enumerate()
            .map(|(i, (chunk_id, score))| {
                let chunk = index.chunk(chunk_id).expect("search returns indexed chunks");
                local_context(&query.instruction_id, chunk, score, i as u32 + 1)
            })
            .collect())
    }
}

/// Retrieves with `retriever`, clamping `top_k` from the config.
pub fn retrieve(
    query: &SearchQuery,
    config: &RetrievalConfig,
    retriever: &dyn Retriever,
) -> Result<Vec<RetrievedContext>, RetrievalError> {
    let mut contexts = retriever.retrieve(query, config.top_k)?;
    contexts.truncate(config.top_k);
    Ok(contexts)
}
