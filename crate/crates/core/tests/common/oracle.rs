//! Brute-force reference implementations used as test oracles. Each one is
//! written independently of the library code it checks.

use std::collections::HashMap;

use groundset::model::canonicalize;
use groundset::retrieval::{analyze, CorpusIndex};

fn words(text: &str) -> Vec<String> {
    canonicalize(text)
        .split(' ')
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Memoized top-down LCS length.
pub fn lcs(a: &[String], b: &[String]) -> usize {
    fn go(a: &[String], b: &[String], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

/// Token LCS-F1 of the canonical texts.
pub fn similarity(a: &str, b: &str) -> f64 {
    let (x, y) = (words(a), words(b));
    if x.is_empty() || y.is_empty() {
        return 0.0;
    }
    2.0 * lcs(&x, &y) as f64 / (x.len() + y.len()) as f64
}

/// Pairwise dedup: a candidate is kept unless its canonical form equals, or
/// reaches `threshold` similarity with, any existing text or earlier keeper.
pub fn dedup(candidates: &[String], existing: &[String], threshold: f64) -> Vec<String> {
    let mut members: Vec<String> = existing.iter().map(|t| canonicalize(t)).collect();
    let mut kept = Vec::new();
    for c in candidates {
        let canon = canonicalize(c);
        let duplicate = members
            .iter()
            .any(|m| *m == canon || similarity(m, &canon) >= threshold);
        if !duplicate {
            members.push(canon.clone());
            kept.push(canon);
        }
    }
    kept
}

/// Memoized top-down Levenshtein distance.
pub fn levenshtein(a: &[&str], b: &[&str]) -> usize {
    fn go(a: &[&str], b: &[&str], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            1 + go(a, b, i + 1, j, memo)
                .min(go(a, b, i, j + 1, memo))
                .min(go(a, b, i + 1, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

pub fn edit_ratio(rejected: &str, chosen: &str) -> f64 {
    let a: Vec<&str> = rejected.split_whitespace().collect();
    let b: Vec<&str> = chosen.split_whitespace().collect();
    match a.len().max(b.len()) {
        0 => 0.0,
        n => levenshtein(&a, &b) as f64 / n as f64,
    }
}

/// Scores every chunk from its raw text (no postings), keeps positive
/// scores, sorts by score then chunk id, and truncates to `top_k`.
pub fn bm25_ranking(index: &CorpusIndex, query: &str, top_k: usize, k1: f64, b: f64) -> Vec<(u32, f64)> {
    let mut terms: Vec<String> = Vec::new();
    for t in analyze(query) {
        if !terms.contains(&t) {
            terms.push(t);
        }
    }
    let docs: Vec<Vec<String>> = index.chunks.iter().map(|c| analyze(&c.text)).collect();
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let df: Vec<f64> = terms
        .iter()
        .map(|t| docs.iter().filter(|d| d.contains(t)).count() as f64)
        .collect();
    let mut scored = Vec::new();
    for (id, doc) in docs.iter().enumerate() {
        let dl = doc.len() as f64;
        let mut score = 0.0;
        for (t, df) in terms.iter().zip(&df) {
            let tf = doc.iter().filter(|w| *w == t).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * (dl / avgdl)));
        }
        if score > 0.0 {
            scored.push((id as u32, score));
        }
    }
    scored.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
    scored.truncate(top_k);
    scored
}
