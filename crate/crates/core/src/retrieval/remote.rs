//! HTTP-backed evidence sources: a generic web-search engine and
//! domain APIs, both mapped through configurable JSON paths.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{RetrievalError, Retriever, SearchQuery};
use crate::filtering::rule_filter;
use crate::gateway::{build_agent, check_status, map_ureq_error, Gateway, GatewayError, TransportError};
use crate::model::{hash_fields, FilterStatus, RetrievedContext, SourceKind, SourceRef};

/// Resolves a dotted path (`"data.items.0.text"`) inside `value`. Numeric
/// segments index arrays. The empty path returns `value` itself.
pub fn json_path<'a>(value: &'a Value, path: &str) -> Option<&'a Value> {
    if path.is_empty() {
        return Some(value);
    }
    path.split('.').try_fold(value, |v, seg| match v {
        Value::Array(items) => seg.parse::<usize>().ok().and_then(|i| items.get(i)),
        Value::Object(map) => map.get(seg),
        _ => None,
    })
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

pub trait HttpFetch: Send + Sync {
    fn get_json(&self, url: &str, params: &[(String, String)], bearer: Option<&str>) -> Result<Value, TransportError>;
    fn get_text(&self, url: &str, max_bytes: u64) -> Result<String, TransportError>;
}

pub struct UreqFetch {
    agent: ureq::Agent,
}

impl UreqFetch {
    pub fn new(timeout: Duration) -> Self {
        Self {
            agent: build_agent(timeout),
        }
    }
}

impl HttpFetch for UreqFetch {
    fn get_json(&self, url: &str, params: &[(String, String)], bearer: Option<&str>) -> Result<Value, TransportError> {
        let mut req = self.agent.get(url);
        for (k, v) in params {
            req = req.query(k, v);
        }
        if let Some(key) = bearer {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.call().map_err(map_ureq_error)?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(map_ureq_error)?;
        check_status(status, &body)?;
        serde_json::from_str(&body).map_err(|e| TransportError::Fatal(format!("invalid JSON: {e}")))
    }

    fn get_text(&self, url: &str, max_bytes: u64) -> Result<String, TransportError> {
        let mut resp = self.agent.get(url).call().map_err(map_ureq_error)?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .with_config()
            .limit(max_bytes)
            .read_to_string()
            .map_err(map_ureq_error)?;
        check_status(status, &body)?;
        Ok(body)
    }
}

fn default_query_param() -> String {
    "q".into()
}
fn default_results() -> usize {
    10
}
fn default_true() -> bool {
    true
}
fn default_fetch_timeout() -> u64 {
    15
}
fn default_max_page_bytes() -> u64 {
    2 * 1024 * 1024
}
fn default_page_tokens() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WebSearchConfig {
    pub base_url: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_query_param")]
    pub query_param: String,
    pub result_path: String,
    pub snippet_path: String,
    pub url_path: String,
    #[serde(default = "default_results")]
    pub results_per_call: usize,
    /// Extra fixed query parameters (engine id, locale, ...).
    #[serde(default)]
    pub extra_params: BTreeMap<String, String>,
    #[serde(default = "default_true")]
    pub fetch_pages: bool,
    #[serde(default = "default_fetch_timeout")]
    pub fetch_timeout_secs: u64,
    #[serde(default = "default_max_page_bytes")]
    pub max_page_bytes: u64,
    /// Cleaned page tokens appended after each snippet.
    #[serde(default = "default_page_tokens")]
    pub page_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalApiConfig {
    /// Descriptor used in source locators.
    pub name: String,
    pub base_url: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_query_param")]
    pub query_param: String,
    pub result_path: String,
    pub text_path: String,
    #[serde(default)]
    pub id_path: Option<String>,
    #[serde(default)]
    pub score_path: Option<String>,
    #[serde(default)]
    pub extra_params: BTreeMap<String, String>,
}

fn read_key(env: &Option<String>) -> Result<Option<String>, RetrievalError> {
    match env {
        None => Ok(None),
        Some(var) => std::env::var(var)
            .map(Some)
            .map_err(|_| RetrievalError::Provider(GatewayError::MissingApiKey(var.clone()))),
    }
}

/// Runs `call` through the gateway's retry/rate-limit policy when one is
/// attached, otherwise once.
fn guarded<T>(
    gateway: Option<&Gateway>,
    key: &str,
    call: impl FnMut() -> Result<T, TransportError>,
) -> Result<T, GatewayError> {
    match gateway {
        Some(gw) => gw.retrying(key, call).map(|(v, _)| v),
        None => {
            let mut call = call;
            call().map_err(|e| match e {
                TransportError::Transient(m) => GatewayError::ExhaustedRetries {
                    attempts: 1,
                    last_error: m,
                },
                TransportError::Auth(status) => GatewayError::Auth { status },
                TransportError::Fatal(m) => GatewayError::Provider(m),
            })
        }
    }
}

fn result_items<'a>(body: &'a Value, path: &str) -> &'a [Value] {
    json_path(body, path)
        .and_then(Value::as_array)
        .map(Vec::as_slice)
        .unwrap_or(&[])
}

pub struct WebSearchRetriever {
    config: WebSearchConfig,
    fetch: Box<dyn HttpFetch>,
    gateway: Option<Arc<Gateway>>,
    api_key: Option<String>,
}

impl WebSearchRetriever {
    pub fn new(config: WebSearchConfig, gateway: Option<Arc<Gateway>>) -> Result<Self, RetrievalError> {
        let fetch = Box::new(UreqFetch::new(Duration::from_secs(config.fetch_timeout_secs)));
        Self::with_fetch(config, fetch, gateway)
    }

    pub fn with_fetch(
        config: WebSearchConfig,
        fetch: Box<dyn HttpFetch>,
        gateway: Option<Arc<Gateway>>,
    ) -> Result<Self, RetrievalError> {
        let api_key = read_key(&config.api_key_env)?;
        Ok(Self {
            config,
            fetch,
            gateway,
            api_key,
        })
    }

    fn page_excerpt(&self, url: &str) -> Option<String> {
        let gw = self.gateway.as_deref();
        match guarded(gw, url, || self.fetch.get_text(url, self.config.max_page_bytes)) {
            Ok(html) => {
                let cleaned = rule_filter(&html);
                let excerpt: Vec<&str> = cleaned.split_whitespace().take(self.config.page_tokens).collect();
                Some(excerpt.join(" "))
            }
            Err(err) => {
                tracing::warn!(%url, %err, "page fetch failed; using snippet only");
                None
            }
        }
    }
}

impl Retriever for WebSearchRetriever {
    /// Contexts follow engine result order; score is `1 / rank`. Text is the
    /// cleaned snippet followed by a cleaned excerpt of the fetched page.
    fn retrieve(&self, query: &SearchQuery, top_k: usize) -> Result<Vec<RetrievedContext>, RetrievalError> {
        let mut params: Vec<(String, String)> = self.config.extra_params.clone().into_iter().collect();
        params.push((self.config.query_param.clone(), query.text.clone()));
        let key = hash_fields(&["web", &self.config.base_url, &query.text]);
        let body = guarded(self.gateway.as_deref(), &key, || {
            self.fetch
                .get_json(&self.config.base_url, &params, self.api_key.as_deref())
        })?;

        let limit = top_k.min(self.config.results_per_call);
        let mut out = Vec::new();
        for (i, item) in result_items(&body, &self.config.result_path).iter().enumerate() {
            if out.len() == limit {
                break;
            }
            let snippet = json_path(item, &self.config.snippet_path)
                .map(value_text)
                .unwrap_or_default();
            let url = json_path(item, &self.config.url_path)
                .map(value_text)
                .unwrap_or_default();
            let mut text = rule_filter(&snippet);
            if self.config.fetch_pages && !url.is_empty() {
                if let Some(page) = self.page_excerpt(&url) {
                    if !page.is_empty() {
                        if !text.is_empty() {
                            text.push('\n');
                        }
                        text.push_str(&page);
                    }
                }
            }
            if text.is_empty() {
                continue;
            }
            let rank = out.len() as u32 + 1;
            let locator = if url.is_empty() { format!("result:{i}") } else { url };
            let mut ctx = RetrievedContext::new(
                &query.instruction_id,
                text,
                SourceRef {
                    kind: SourceKind::WebSearch,
                    locator,
                },
                1.0 / rank as f64,
                rank,
            );
            ctx.filter_status = FilterStatus::RuleCleaned;
            out.push(ctx);
        }
        Ok(out)
    }
}

pub struct ExternalApiRetriever {
    config: ExternalApiConfig,
    fetch: Box<dyn HttpFetch>,
    gateway: Option<Arc<Gateway>>,
    api_key: Option<String>,
}

impl ExternalApiRetriever {
    pub fn new(config: ExternalApiConfig, gateway: Option<Arc<Gateway>>) -> Result<Self, RetrievalError> {
        Self::with_fetch(config, Box::new(UreqFetch::new(Duration::from_secs(30))), gateway)
    }

    pub fn with_fetch(
        config: ExternalApiConfig,
        fetch: Box<dyn HttpFetch>,
        gateway: Option<Arc<Gateway>>,
    ) -> Result<Self, RetrievalError> {
        let api_key = read_key(&config.api_key_env)?;
        Ok(Self {
            config,
            fetch,
            gateway,
            api_key,
        })
    }
}

impl Retriever for ExternalApiRetriever {
    /// Records are ordered by `score_path` (descending, stable) when it is
    /// configured, otherwise by response order with score `1 / rank`.
    fn retrieve(&self, query: &SearchQuery, top_k: usize) -> Result<Vec<RetrievedContext>, RetrievalError> {
        let mut params: Vec<(String, String)> = self.config.extra_params.clone().into_iter().collect();
        params.push((self.config.query_param.clone(), query.text.clone()));
        let key = hash_fields(&["api", &self.config.base_url, &query.text]);
        let body = guarded(self.gateway.as_deref(), &key, || {
            self.fetch
                .get_json(&self.config.base_url, &params, self.api_key.as_deref())
        })?;

        let mut records: Vec<(usize, String, String, Option<f64>)> = result_items(&body, &self.config.result_path)
            .iter()
            .enumerate()
            .filter_map(|(i, item)| {
                let text = json_path(item, &self.config.text_path).map(value_text)?;
                if text.trim().is_empty() {
                    return None;
                }
                let id = self
                    .config
                    .id_path
                    .as_deref()
                    .and_then(|p| json_path(item, p))
                    .map(value_text)
                    .unwrap_or_else(|| i.to_string());
                let score = self
                    .config
                    .score_path
                    .as_deref()
                    .and_then(|p| json_path(item, p))
                    .and_then(Value::as_f64);
                Some((i, id, text, score))
            })
            .collect();
        if self.config.score_path.is_some() {
            records.sort_by(|a, b| b.3.unwrap_or(0.0).total_cmp(&a.3.unwrap_or(0.0)).then(a.0.cmp(&b.0)));
        }
        Ok(records
            .into_iter()
            .take(top_k)
            .enumerate()
            .map(|(i, (_, id, text, score))| {
                let rank = i as u32 + 1;
                RetrievedContext::new(
                    &query.instruction_id,
                    text,
                    SourceRef {
                        kind: SourceKind::ExternalApi,
                        locator: format!("{}:{}", self.config.name, id),
                    },
                    score.unwrap_or(1.0 / rank as f64),
                    rank,
                )
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::sync::Mutex;

    struct Scripted {
        search: Value,
        pages: BTreeMap<String, Result<String, TransportError>>,
        seen: Mutex<Vec<Vec<(String, String)>>>,
    }

    impl HttpFetch for Scripted {
        fn get_json(
            &self,
            _url: &str,
            params: &[(String, String)],
            _bearer: Option<&str>,
        ) -> Result<Value, TransportError> {
            self.seen.lock().unwrap().push(params.to_vec());
            Ok(self.search.clone())
        }
        fn get_text(&self, url: &str, _max: u64) -> Result<String, TransportError> {
            self.pages
                .get(url)
                .cloned()
                .unwrap_or(Err(TransportError::Fatal("404".into())))
        }
    }

    fn query() -> SearchQuery {
        SearchQuery {
            instruction_id: "ins".into(),
            text: "current president".into(),
            rewriter_template_id: "rewrite".into(),
        }
    }

    #[test]
    fn json_paths() {
        let v = json!({"a": {"b": [{"c": 1}, {"c": "two"}]}});
        assert_eq!(json_path(&v, "a.b.1.c"), Some(&json!("two")));
        assert_eq!(json_path(&v, "a.x"), None);
        assert_eq!(json_path(&v, ""), Some(&v));
    }

    #[test]
    fn web_results_map_to_ranked_contexts() {
        let fetch = Scripted {
            search: json!({"web": {"results": [
                {"snippet": "The <b>president</b> is X.", "link": "https://a.example/1"},
                {"snippet": "", "link": ""},
                {"snippet": "Second result", "link": "https://b.example/2"}
            ]}}),
            pages: BTreeMap::from([(
                "https://a.example/1".to_string(),
                Ok("<html><script>x</script><p>Page body text</p></html>".to_string()),
            )]),
            seen: Mutex::new(Vec::new()),
        };
        let config = WebSearchConfig {
            base_url: "https://search.example/api".into(),
            api_key_env: None,
            query_param: "q".into(),
            result_path: "web.results".into(),
            snippet_path: "snippet".into(),
            url_path: "link".into(),
            results_per_call: 10,
            extra_params: BTreeMap::from([("count".to_string(), "10".to_string())]),
            fetch_pages: true,
            fetch_timeout_secs: 15,
            max_page_bytes: 1024,
            page_tokens: 50,
        };
        let r = WebSearchRetriever::with_fetch(config, Box::new(fetch), None).unwrap();
        let hits = r.retrieve(&query(), 5).unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].chunk_text, "The president is X.\nPage body text");
        assert_eq!(hits[0].source.locator, "https://a.example/1");
        assert_eq!(hits[1].chunk_text, "Second result");
        assert_eq!((hits[0].rank, hits[1].rank), (1, 2));
        assert!(hits[0].score > hits[1].score);
        assert!(hits.iter().all(|h| h.filter_status == FilterStatus::RuleCleaned));
    }

    #[test]
    fn api_records_sort_by_score_path() {
        let fetch = Scripted {
            search: json!({"items": [
                {"id": "a", "body": "low", "relevance": 0.2},
                {"id": "b", "body": "high", "relevance": 0.9},
                {"id": "c", "body": "", "relevance": 1.0}
            ]}),
            pages: BTreeMap::new(),
            seen: Mutex::new(Vec::new()),
        };
        let config = ExternalApiConfig {
            name: "tourism-db".into(),
            base_url: "https://api.example/search".into(),
            api_key_env: None,
            query_param: "query".into(),
            result_path: "items".into(),
            text_path: "body".into(),
            id_path: Some("id".into()),
            score_path: Some("relevance".into()),
            extra_params: BTreeMap::new(),
        };
        let r = ExternalApiRetriever::with_fetch(config, Box::new(fetch), None).unwrap();
        let hits = r.retrieve(&query(), 5).unwrap();
        assert_eq!(
            hits.iter().map(|h| h.chunk_text.as_str()).collect::<Vec<_>>(),
            vec!["high", "low"]
        );
        assert_eq!(hits[0].source.locator, "tourism-db:b");
        assert_eq!(hits[0].score, 0.9);
    }
}
