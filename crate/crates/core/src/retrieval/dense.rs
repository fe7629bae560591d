use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use super::{local_context, CorpusIndex, RetrievalError, Retriever, SearchQuery};
use crate::gateway::{cosine, Gateway};
use crate::model::RetrievedContext;

const EMBED_BATCH: usize = 64;

/// Cosine-similarity retrieval using the gateway's embedding endpoint.
/// Chunk vectors are embedded once and cached for the retriever's lifetime.
pub struct DenseRetriever {
    index: Arc<CorpusIndex>,
    embedder: Arc<Gateway>,
    cache: Mutex<HashMap<u32, Vec<f64>>>,
}

impl DenseRetriever {
    pub fn new(index: Arc<CorpusIndex>, embedder: Arc<Gateway>) -> Self {
        Self {
            index,
            embedder,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn ensure_chunk_vectors(&self) -> Result<(), RetrievalError> {
        let missing: Vec<u32> = {
            let cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
            self.index
                .chunks
                .iter()
                .map(|c| c.chunk_id)
                .filter(|id| !cache.contains_key(id))
                .collect()
        };
        for batch in missing.chunks(EMBED_BATCH) {
            let texts: Vec<String> = batch
                .iter()
                .map(|id| self.index.chunks[*id as usize].text.clone())
                .collect();
            let vectors = self.embedder.embed(&texts)?;
            let mut cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
            for (id, v) in batch.iter().zip(vectors) {
                cache.insert(*id, v);
            }
        }
        Ok(())
    }
}

impl Retriever for DenseRetriever {
    /// Ranks by raw cosine (ties by chunk id); stored scores are clamped at
    /// zero, which keeps them non-increasing by rank.
    fn retrieve(&self, query: &SearchQuery, top_k: usize) -> Result<Vec<RetrievedContext>, RetrievalError> {
        if self.index.chunks.is_empty() {
            return Ok(Vec::new());
        }
        self.ensure_chunk_vectors()?;
        let qv = self
            .embedder
            .embed(std::slice::from_ref(&query.text))?
            .pop()
            .unwrap_or_default();
        let mut ranked: Vec<(u32, f64)> = {
            let cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
            self.index
                .chunks
                .iter()
                .map(|c| (c.chunk_id, cosine(&qv, &cache[&c.chunk_id])))
                .collect()
        };
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(top_k);
        Ok(ranked
            .into_iter()
            .enumerate()
            .map(|(i, (id, score))| {
                local_context(
                    &query.instruction_id,
                    &self.index.chunks[id as usize],
                    score,
                    i as u32 + 1,
                )
            })
            .collect())
    }
}
