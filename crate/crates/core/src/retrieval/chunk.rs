use std::ops::Range;

/// Token windows over the whitespace-token sequence of `body`.
///
/// Windows have `size` tokens and advance by `size - overlap`; the final
/// window may be shorter. Requires `size > overlap`.
pub fn chunk_windows(token_count: usize, size: usize, overlap: usize) -> Vec<Range<usize>> {
    assert!(size > overlap, "chunk size must exceed overlap");
    let stride = size - overlap;
    let mut windows = Vec::new();
    let mut start = 0;
    while start < token_count {
        let end = (start + size).min(token_count);
        windows.push(start..end);
        if end == token_count {
            break;
        }
        start += stride;
    }
    windows
}

/// Splits `body` into overlapping chunks of whitespace tokens joined by a
/// single space, in document order. Empty bodies produce no chunks.
pub fn chunk_document(body: &str, size: usize, overlap: usize) -> Vec<String> {
    let tokens: Vec<&str> = body.split_whitespace().collect();
    chunk_windows(tokens.len(), size, overlap)
        .into_iter()
        .map(|r| tokens[r].join(" "))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_arithmetic() {
        assert_eq!(chunk_windows(10, 4, 1), vec![0..4, 3..7, 6..10]);
        assert_eq!(chunk_windows(3, 4, 0), vec![0..3]);
        assert_eq!(chunk_windows(8, 4, 0), vec![0..4, 4..8]);
        assert!(chunk_windows(0, 4, 1).is_empty());
    }

    #[test]
    fn chunks_join_tokens() {
        let chunks = chunk_document("a b  c\nd e", 2, 1);
        assert_eq!(chunks, vec!["a b", "b c", "c d", "d e"]);
        assert!(chunk_document("   ", 4, 1).is_empty());
    }
}
