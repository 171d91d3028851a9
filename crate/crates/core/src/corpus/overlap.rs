use std::collections::{BTreeMap, BTreeSet, HashSet};

use super::Corpus;
use crate::error::{Error, Result};

/// The `k` most frequent non-stopword tokens (ties lexicographic).
pub fn top_k_tokens(corpus: &Corpus, k: usize, stopwords: &BTreeSet<String>) -> Vec<String> {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for p in &corpus.posts {
        for t in &p.tokens {
            if !stopwords.contains(t) {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().take(k).map(|(t, _)| t.to_string()).collect()
}

/// Percentage of shared top-`top_k` tokens between two slices.
///
/// When a slice has fewer than `top_k` distinct tokens all of them are used,
/// and the intersection is normalized by the smaller of the two sets.
pub fn vocabulary_overlap(
    a: &Corpus,
    b: &Corpus,
    top_k: usize,
    stopwords: &BTreeSet<String>,
) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("vocabulary_overlap: empty slice".into()));
    }
    if top_k == 0 {
        return Err(Error::InvalidInput("vocabulary_overlap: top_k must be ≥ 1".into()));
    }
    let ta = top_k_tokens(a, top_k, stopwords);
    let tb = top_k_tokens(b, top_k, stopwords);
    let denom = ta.len().min(tb.len());
    if denom == 0 {
        return Err(Error::InvalidInput(
            "vocabulary_overlap: slice has no non-stopword tokens".into(),
        ));
    }
    let sa: HashSet<&String> = ta.iter().collect();
    let shared = tb.iter().filter(|t| sa.contains(t)).count();
    Ok(shared as f64 / denom as f64 * 100.0)
}

/// Pairwise overlap matrix over `slices` (symmetric, 100 on the diagonal).
pub fn overlap_matrix(
    slices: &[&Corpus],
    top_k: usize,
    stopwords: &BTreeSet<String>,
) -> Result<Vec<Vec<f64>>> {
    let n = slices.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = vocabulary_overlap(slices[i], slices[j], top_k, stopwords)?;
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    Ok(m)
}
