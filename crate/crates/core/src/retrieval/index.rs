//! Chunked corpus with an inverted index and Okapi BM25 scoring.
//!
//! ```text
//! score(q, c) = Σ_t IDF(t) · tf·(k1+1) / (tf + k1·(1 − b + b·dl/avgdl))
//! IDF(t)      = ln((N − df + 0.5)/(df + 0.5) + 1)
//! ```
//!
//! "Documents" in the statistics are chunks: `N` is the chunk count, `df`
//! the number of chunks containing a term, and `dl` a chunk's analyzed term
//! count.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::chunk::chunk_document;
use super::RetrievalError;
use crate::io::write_atomic;
use crate::model::token_count;

/// First line of a persisted index file.
pub const INDEX_MAGIC: &str = "GROUNDSET-INDEX";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: u32,
    pub doc_id: String,
    pub text: String,
    /// Whitespace tokens.
    pub token_count: usize,
    /// Analyzed terms; the BM25 document length.
    pub length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub chunk_id: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexStats {
    pub chunk_count: usize,
    pub total_length: u64,
    pub avgdl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub chunk_size: usize,
    pub chunk_overlap: usize,
    pub documents: Vec<Document>,
    pub chunks: Vec<Chunk>,
    pub postings: BTreeMap<String, Vec<Posting>>,
    pub stats: IndexStats,
}

/// Lowercased alphanumeric runs. Shared by indexing and querying.
pub fn analyze(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// One term's BM25 contribution.
#[inline]
pub fn term_weight(idf: f64, tf: f64, dl: f64, avgdl: f64, k1: f64, b: f64) -> f64 {
    let norm = if avgdl > 0.0 { dl / avgdl } else { 0.0 };
    idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm))
}

#[inline]
pub fn idf(n: usize, df: usize) -> f64 {
    let (n, df) = (n as f64, df as f64);
    ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
}

impl CorpusIndex {
    pub fn build(documents: Vec<Document>, chunk_size: usize, chunk_overlap: usize) -> Self {
        let mut chunks = Vec::new();
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut total_length = 0u64;
        for doc in &documents {
            for text in chunk_document(&doc.body, chunk_size, chunk_overlap) {
                let chunk_id = chunks.len() as u32;
                let terms = analyze(&text);
                let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
                for t in &terms {
                    *tf.entry(t.as_str()).or_default() += 1;
                }
                for (term, count) in tf {
                    postings
                        .entry(term.to_string())
                        .or_default()
                        .push(Posting { chunk_id, tf: count });
                }
                total_length += terms.len() as u64;
                chunks.push(Chunk {
                    chunk_id,
                    doc_id: doc.doc_id.clone(),
                    token_count: token_count(&text),
                    length: terms.len(),
                    text,
                });
            }
        }
        let chunk_count = chunks.len();
        let avgdl = if chunk_count == 0 {
            0.0
        } else {
            total_length as f64 / chunk_count as f64
        };
        Self {
            chunk_size,
            chunk_overlap,
            documents,
            chunks,
            postings,
            stats: IndexStats {
                chunk_count,
                total_length,
                avgdl,
            },
        }
    }

    pub fn chunk(&self, chunk_id: u32) -> Option<&Chunk> {
        self.chunks.get(chunk_id as usize)
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn tf(&self, term: &str, chunk_id: u32) -> u32 {
        self.postings
            .get(term)
            .and_then(|p| p.binary_search_by_key(&chunk_id, |x| x.chunk_id).ok().map(|i| p[i].tf))
            .unwrap_or(0)
    }

    /// BM25 of one chunk for `query_terms` (already analyzed). Terms absent
    /// from the index contribute nothing.
    pub fn bm25_score(&self, query_terms: &[String], chunk_id: u32, k1: f64, b: f64) -> f64 {
        let Some(chunk) = self.chunk(chunk_id) else {
            return 0.0;
        };
        query_terms
            .iter()
            .map(|t| {
                let tf = self.tf(t, chunk_id);
                if tf == 0 {
                    return 0.0;
                }
                let idf = idf(self.stats.chunk_count, self.df(t));
                term_weight(idf, tf as f64, chunk.length as f64, self.stats.avgdl, k1, b)
            })
            .sum()
    }

    /// Chunks with a positive score, best first, ties by ascending chunk id.
    pub fn search(&self, query_terms: &[String], top_k: usize, k1: f64, b: f64) -> Vec<(u32, f64)> {
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in query_terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = idf(self.stats.chunk_count, list.len());
            for p in list {
                let dl = self.chunks[p.chunk_id as usize].length as f64;
                let w = term_weight(idf, p.tf as f64, dl, self.stats.avgdl, k1, b);
                *scores.entry(p.chunk_id).or_insert(0.0) += w;
            }
        }
        let mut ranked: Vec<(u32, f64)> = scores.into_iter().filter(|(_, s)| *s > 0.0).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(top_k);
        ranked
    }

    /// Writes `GROUNDSET-INDEX <version>\n` followed by the JSON body.
    pub fn save(&self, path: &Path) -> io::Result<()> {
        let mut buf = Vec::new();
        writeln!(buf, "{INDEX_MAGIC} {INDEX_VERSION}")?;
        serde_json::to_writer(&mut buf, self).map_err(io::Error::other)?;
        buf.push(b'\n');
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let file = fs::File::open(path).map_err(|e| RetrievalError::Io(format!("{}: {e}", path.display())))?;
        let mut reader = BufReader::new(file);
        let mut header = String::new();
        reader
            .read_line(&mut header)
            .map_err(|e| RetrievalError::Io(e.to_string()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(INDEX_MAGIC) {
            return Err(RetrievalError::IndexFormat(format!(
                "{}: missing index header",
                path.display()
            )));
        }
        let version: u32 = parts.next().and_then(|v| v.parse().ok()).unwrap_or(0);
        if version != INDEX_VERSION {
            return Err(RetrievalError::IndexFormat(format!(
                "{}: unsupported index version {version}",
                path.display()
            )));
        }
        serde_json::from_reader(reader).map_err(|e| RetrievalError::IndexFormat(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, body: &str) -> Document {
        Document {
            doc_id: id.into(),
            title: None,
            body: body.into(),
        }
    }

    #[test]
    fn single_chunk_value_matches_formula() {
        let index = CorpusIndex::build(vec![doc("d", "w")], 256, 32);
        let score = index.bm25_score(&["w".to_string()], 0, 1.2, 0.75);
        // N = 1, df = 1: IDF = ln(0.5/1.5 + 1) = ln(4/3); tf = 1 and dl = avgdl.
        let expected = (4.0f64 / 3.0).ln() * (1.0 * 2.2) / (1.0 + 1.2);
        assert!((score - expected).abs() < 1e-12);
        assert!((score - (4.0f64 / 3.0).ln()).abs() < 1e-9);
    }

    #[test]
    fn stats_are_exact() {
        let index = CorpusIndex::build(vec![doc("a", "x y z"), doc("b", "x x")], 256, 32);
        assert_eq!(index.stats.chunk_count, 2);
        assert_eq!(index.stats.avgdl, 2.5);
        assert_eq!(index.df("x"), 2);
        assert_eq!(index.tf("x", 1), 2);
        assert!(index
            .postings
            .values()
            .flatten()
            .all(|p| (p.chunk_id as usize) < index.chunks.len()));
    }

    #[test]
    fn absent_terms_score_zero_and_ties_sort_by_id() {
        let index = CorpusIndex::build(
            vec![doc("a", "rice saffron"), doc("b", "rice saffron"), doc("c", "bread")],
            256,
            32,
        );
        assert_eq!(index.bm25_score(&["kebab".to_string()], 0, 1.2, 0.75), 0.0);
        let hits = index.search(&analyze("saffron rice"), 5, 1.2, 0.75);
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].1, hits[1].1);
        assert_eq!((hits[0].0, hits[1].0), (0, 1));
    }

    #[test]
    fn save_load_round_trip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.idx");
        let index = CorpusIndex::build(vec![doc("a", "one two three"), doc("b", "four")], 2, 1);
        index.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("GROUNDSET-INDEX 1\n"));
        assert_eq!(CorpusIndex::load(&path).unwrap(), index);

        fs::write(&path, "{}").unwrap();
        assert!(matches!(CorpusIndex::load(&path), Err(RetrievalError::IndexFormat(_))));
    }
}
