use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use super::{Corpus, Post};
use crate::diffcore::SparseRow;
use crate::error::{Error, Result};

/// Dense token index built from designated fitting corpora.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    frequencies: Vec<u64>,
    stopwords: BTreeSet<String>,
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, frequencies: Vec<u64>, stopwords: BTreeSet<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens,
            index,
            frequencies,
            stopwords,
        }
    }

    /// Index order follows `tokens`; frequencies are left at zero.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let n = tokens.len();
        Self::from_parts(tokens, vec![0; n], BTreeSet::new())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn frequency(&self, index: usize) -> u64 {
        self.frequencies[index]
    }

    pub fn stopwords(&self) -> &BTreeSet<String> {
        &self.stopwords
    }

    /// `token<TAB>frequency`, one per line, in index order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (t, f) in self.tokens.iter().zip(&self.frequencies) {
            out.push_str(t);
            out.push('\t');
            out.push_str(&f.to_string());
            out.push('\n');
        }
        crate::io::write_atomic(path, out.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_to_string(path)?;
        let mut tokens = Vec::new();
        let mut freqs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (tok, freq) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected `token<TAB>frequency`".into(),
            })?;
            let freq = freq.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("bad frequency `{freq}`"),
            })?;
            tokens.push(tok.to_string());
            freqs.push(freq);
        }
        Ok(Vocabulary::from_parts(tokens, freqs, BTreeSet::new()))
    }
}

/// Keeps tokens with frequency ≥ `min_freq` that are not stopwords, ranked by
/// frequency (ties lexicographic) and truncated to `max_size`.
///
/// Only the corpora passed in are counted; callers pass the fitting data
/// (training history plus trans-data), never test slices.
pub fn build_vocabulary(
    corpora: &[&Corpus],
    min_freq: u64,
    max_size: usize,
    stopwords: &BTreeSet<String>,
) -> Result<Vocabulary> {
    if min_freq == 0 {
        return Err(Error::InvalidInput("min_freq must be at least 1".into()));
    }
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for c in corpora {
        for p in &c.posts {
            for t in &p.tokens {
                if !stopwords.contains(t) {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
            }
        }
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().filter(|(_, n)| *n >= min_freq).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size);
    if ranked.is_empty() {
        return Err(Error::InvalidInput("vocabulary is empty".into()));
    }
    let (tokens, freqs) = ranked.into_iter().map(|(t, n)| (t.to_string(), n)).unzip();
    Ok(Vocabulary::from_parts(tokens, freqs, stopwords.clone()))
}

/// Sparse bag-of-words counts over a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct BowVector {
    /// `(index, count)` sorted by index, counts strictly positive.
    counts: SparseRow,
    dimension: usize,
}

impl BowVector {
    pub fn new(mut counts: SparseRow, dimension: usize) -> Result<Self> {
        counts.sort_by_key(|(i, _)| *i);
        if counts.iter().any(|&(i, c)| i >= dimension || c < 0.0) {
            return Err(Error::dim(format!("bow entries out of range for dimension {dimension}")));
        }
        counts.retain(|&(_, c)| c > 0.0);
        Ok(BowVector { counts, dimension })
    }

    pub fn counts(&self) -> &SparseRow {
        &self.counts
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn get(&self, index: usize) -> f64 {
        self.counts
            .binary_search_by_key(&index, |(i, _)| *i)
            .map_or(0.0, |k| self.counts[k].1)
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().map(|(_, c)| c).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        for &(i, c) in &self.counts {
            v[i] = c;
        }
        v
    }
}

/// Counts in-vocabulary tokens; out-of-vocabulary tokens are dropped.
pub fn vectorize_bow(post: &Post, vocab: &Vocabulary) -> BowVector {
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    for t in &post.tokens {
        if let Some(i) = vocab.get(t) {
            *counts.entry(i).or_default() += 1.0;
        }
    }
    BowVector {
        counts: counts.into_iter().collect(),
        dimension: vocab.len(),
    }
}
