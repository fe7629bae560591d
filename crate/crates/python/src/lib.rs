//! Python bindings for the `groundset` core library.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use groundset::pipeline::{self, PipelineError, RunConfig, RunOptions};
use groundset::retrieval::{self, Document};

create_exception!(groundset, GroundsetError, PyException, "A pipeline run failed.");
create_exception!(
    groundset,
    ConfigError,
    GroundsetError,
    "Invalid configuration or input (CLI exit code 2)."
);
create_exception!(
    groundset,
    ProviderExhausted,
    GroundsetError,
    "Provider retries exhausted (CLI exit code 3)."
);

fn pipeline_err(e: PipelineError) -> PyErr {
    match e.exit_code() {
        2 => ConfigError::new_err(e.to_string()),
        3 => ProviderExhausted::new_err(e.to_string()),
        _ => GroundsetError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyfunction]
fn canonicalize(text: &str) -> String {
    groundset::model::canonicalize(text)
}

#[pyfunction]
fn content_hash(text: &str) -> String {
    groundset::model::content_hash(text)
}

/// Token LCS-F1 between two texts.
#[pyfunction]
fn similarity(a: &str, b: &str) -> f64 {
    groundset::expansion::similarity(a, b)
}

/// Candidates (canonical text) that survive near-duplicate filtering.
#[pyfunction]
#[pyo3(signature = (candidates, existing, threshold=0.7))]
fn dedup_filter(candidates: Vec<String>, existing: Vec<String>, threshold: f64) -> PyResult<Vec<String>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(PyValueError::new_err("threshold must lie in [0, 1]"));
    }
    Ok(groundset::expansion::dedup_filter(
        &candidates,
        existing.iter().map(String::as_str),
        threshold,
    ))
}

#[pyfunction]
fn edit_ratio(rejected: &str, chosen: &str) -> f64 {
    groundset::editing::edit_ratio(rejected, chosen)
}

#[pyfunction]
#[pyo3(signature = (body, size=256, overlap=32))]
fn chunk_document(body: &str, size: usize, overlap: usize) -> PyResult<Vec<String>> {
    if size == 0 || overlap >= size {
        return Err(PyValueError::new_err("need size >= 1 and overlap < size"));
    }
    Ok(retrieval::chunk_document(body, size, overlap))
}

#[pyfunction]
fn rule_filter(raw: &str) -> String {
    groundset::filtering::rule_filter(raw)
}

/// BM25 index over `(doc_id, body)` pairs.
#[pyclass(frozen)]
struct CorpusIndex {
    inner: Arc<retrieval::CorpusIndex>,
}

#[pymethods]
impl CorpusIndex {
    #[new]
    #[pyo3(signature = (documents, chunk_size=256, chunk_overlap=32))]
    fn new(documents: Vec<(String, String)>, chunk_size: usize, chunk_overlap: usize) -> PyResult<Self> {
        if chunk_size == 0 || chunk_overlap >= chunk_size {
            return Err(PyValueError::new_err(
                "need chunk_size >= 1 and chunk_overlap < chunk_size",
            ));
        }
        let docs = documents
            .into_iter()
            .map(|(doc_id, body)| Document {
                doc_id,
                title: None,
                body,
            })
            .collect();
        Ok(Self {
            inner: Arc::new(retrieval::CorpusIndex::build(docs, chunk_size, chunk_overlap)),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = retrieval::CorpusIndex::load(&path).map_err(|e| GroundsetError::new_err(e.to_string()))?;
        Ok(Self { inner: Arc::new(inner) })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner
            .save(&path)
            .map_err(|e| GroundsetError::new_err(e.to_string()))
    }

    fn __len__(&self) -> usize {
        self.inner.chunks.len()
    }

    /// `(doc_id, chunk_id, score, text)` tuples, best first.
    #[pyo3(signature = (query, top_k=5, k1=1.2, b=0.75))]
    fn search(&self, query: &str, top_k: usize, k1: f64, b: f64) -> Vec<(String, u32, f64, String)> {
        self.inner
            .search(&retrieval::query_terms(query), top_k, k1, b)
            .into_iter()
            .map(|(id, score)| {
                let chunk = self.inner.chunk(id).expect("search returns indexed chunks");
                (chunk.doc_id.clone(), id, score, chunk.text.clone())
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "CorpusIndex(documents={}, chunks={})",
            self.inner.documents.len(),
            self.inner.chunks.len()
        )
    }
}

/// `{"stage_counts": {stage: n}, "total": n}` for an output directory.
#[pyfunction]
fn stage_summary(py: Python<'_>, output_dir: PathBuf) -> PyResult<Bound<'_, PyAny>> {
    let summary = pipeline::stage_summary(&output_dir).map_err(|e| ConfigError::new_err(e.to_string()))?;
    let dict = PyDict::new(py);
    dict.set_item("stage_counts", summary.stage_counts)?;
    dict.set_item("total", summary.total)?;
    Ok(dict.into_any())
}

/// Seeds as dicts, after validation and de-duplication.
#[pyfunction]
#[pyo3(signature = (path, stage=1))]
fn load_seeds(py: Python<'_>, path: PathBuf, stage: u32) -> PyResult<Bound<'_, PyAny>> {
    let loaded = groundset::seeds::load_seeds(&path, stage).map_err(|e| ConfigError::new_err(e.to_string()))?;
    let seeds: Vec<_> = loaded.pool.seeds().cloned().collect();
    to_py(py, &seeds)
}

fn load_config(config: PathBuf, out: Option<PathBuf>) -> PyResult<RunConfig> {
    let mut config = RunConfig::load(&config).map_err(pipeline_err)?;
    if let Some(out) = out {
        config.paths.output_dir = out;
    }
    Ok(config)
}

fn options(resume: bool, timestamp: Option<String>) -> RunOptions {
    RunOptions {
        resume,
        timestamp,
        ..RunOptions::default()
    }
}

/// Full generate run from a TOML config; returns the run report.
#[pyfunction]
#[pyo3(signature = (config, out=None, resume=false, timestamp=None))]
fn run(
    py: Python<'_>,
    config: PathBuf,
    out: Option<PathBuf>,
    resume: bool,
    timestamp: Option<String>,
) -> PyResult<Bound<'_, PyAny>> {
    let config = load_config(config, out)?;
    let report = py
        .detach(|| pipeline::run(&config, &options(resume, timestamp)))
        .map_err(pipeline_err)?;
    to_py(py, &report)
}

/// Expansion only; writes `seeds.jsonl` and `pool.jsonl`.
#[pyfunction]
#[pyo3(signature = (config, out=None, timestamp=None))]
fn run_expand(
    py: Python<'_>,
    config: PathBuf,
    out: Option<PathBuf>,
    timestamp: Option<String>,
) -> PyResult<Bound<'_, PyAny>> {
    let config = load_config(config, out)?;
    let report = py
        .detach(|| pipeline::run_expand(&config, &options(false, timestamp)))
        .map_err(pipeline_err)?;
    to_py(py, &report)
}

/// Edit run over `paths.edit_seeds`; returns the run report.
#[pyfunction]
#[pyo3(signature = (config, out=None, resume=false, timestamp=None))]
fn run_edit(
    py: Python<'_>,
    config: PathBuf,
    out: Option<PathBuf>,
    resume: bool,
    timestamp: Option<String>,
) -> PyResult<Bound<'_, PyAny>> {
    let config = load_config(config, out)?;
    let report = py
        .detach(|| pipeline::run_edit(&config, &options(resume, timestamp)))
        .map_err(pipeline_err)?;
    to_py(py, &report)
}

#[pymodule]
#[pyo3(name = "groundset")]
fn groundset_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("GroundsetError", py.get_type::<GroundsetError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("ProviderExhausted", py.get_type::<ProviderExhausted>())?;
    m.add_class::<CorpusIndex>()?;
    m.add_function(wrap_pyfunction!(canonicalize, m)?)?;
    m.add_function(wrap_pyfunction!(content_hash, m)?)?;
    m.add_function(wrap_pyfunction!(similarity, m)?)?;
    m.add_function(wrap_pyfunction!(dedup_filter, m)?)?;
    m.add_function(wrap_pyfunction!(edit_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(chunk_document, m)?)?;
    m.add_function(wrap_pyfunction!(rule_filter, m)?)?;
    m.add_function(wrap_pyfunction!(stage_summary, m)?)?;
    m.add_function(wrap_pyfunction!(load_seeds, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_expand, m)?)?;
    m.add_function(wrap_pyfunction!(run_edit, m)?)?;
    Ok(())
}
