//! Corpora: loading, tokenization, vocabularies, chronological splits,
//! overlap diagnostics and the synthetic drifting-corpus generator.

mod overlap;
mod split;
mod stopwords;
mod synth;
mod tokenize;
mod vocab;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub use overlap::{overlap_matrix, top_k_tokens, vocabulary_overlap};
pub use split::{chronological_split, sort_chronologically, SplitCut, SplitSpec, TimeSlices, SLICE_NAMES};
pub use stopwords::{english_stopwords, load_stopwords};
pub use synth::{synth_drift_generate, DriftConfig, SyntheticCorpus, TokenOracle};
pub use tokenize::{tokenize, MENTION_TOKEN};
pub use vocab::{build_vocabulary, vectorize_bow, BowVector, Vocabulary};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Post {
    pub id: String,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
    pub tokens: Vec<String>,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub posts: Vec<Post>,
    pub num_classes: usize,
    pub label_names: Option<Vec<String>>,
}

impl Corpus {
    pub fn new(posts: Vec<Post>, num_classes: usize, label_names: Option<Vec<String>>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Schema("num_classes must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(posts.len());
        for p in &posts {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::Schema(format!("duplicate post id `{}`", p.id)));
            }
            if p.tokens.is_empty() {
                return Err(Error::Schema(format!("post `{}` has no tokens", p.id)));
            }
            if p.timestamp < 0 {
                return Err(Error::Schema(format!("post `{}` has a negative timestamp", p.id)));
            }
            if let Some(l) = p.label {
                if l >= num_classes {
                    return Err(Error::Schema(format!(
                        "post `{}` label {l} out of range for {num_classes} classes",
                        p.id
                    )));
                }
            }
        }
        Ok(Corpus {
            posts,
            num_classes,
            label_names,
        })
    }

    /// An empty corpus sharing this corpus' label space.
    pub fn empty_like(&self) -> Corpus {
        Corpus {
            posts: Vec::new(),
            num_classes: self.num_classes,
            label_names: self.label_names.clone(),
        }
    }

    pub fn with_posts(&self, posts: Vec<Post>) -> Corpus {
        Corpus {
            posts,
            num_classes: self.num_classes,
            label_names: self.label_names.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    /// Copy with every label removed (trans-data view).
    pub fn unlabeled(&self) -> Corpus {
        self.with_posts(
            self.posts
                .iter()
                .map(|p| Post {
                    label: None,
                    ..p.clone()
                })
                .collect(),
        )
    }

    /// Concatenation in argument order. All parts must share the label space.
    pub fn concat(parts: &[&Corpus]) -> Result<Corpus> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of zero corpora".into()))?;
        if parts.iter().any(|c| c.num_classes != first.num_classes) {
            return Err(Error::InvalidInput("concat: differing class counts".into()));
        }
        let posts = parts.iter().flat_map(|c| c.posts.iter().cloned()).collect();
        Corpus::new(posts, first.num_classes, first.label_names.clone())
    }

    /// Writes the corpus as JSONL with the text field holding the
    /// space-joined tokens.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            id: &'a str,
            timestamp: i64,
            text: String,
            #[serde(skip_serializing_if = "Option::is_none")]
            label: Option<Value>,
        }
        let mut out = Vec::new();
        for p in &self.posts {
            let label = p.label.map(|l| match &self.label_names {
                Some(names) => Value::String(names[l].clone()),
                None => Value::from(l),
            });
            serde_json::to_writer(
                &mut out,
                &Line {
                    id: &p.id,
                    timestamp: p.timestamp,
                    text: p.tokens.join(" "),
                    label,
                },
            )?;
            out.push(b'\n');
        }
        crate::io::write_atomic(path, &out)
    }
}

/// Field names of the JSONL corpus format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSchema {
    pub id_field: String,
    pub timestamp_field: String,
    pub text_field: String,
    pub label_field: String,
    /// When set, string labels must be one of these; integer labels index it.
    pub label_names: Option<Vec<String>>,
}

impl Default for CorpusSchema {
    fn default() -> Self {
        CorpusSchema {
            id_field: "id".into(),
            timestamp_field: "timestamp".into(),
            text_field: "text".into(),
            label_field: "label".into(),
            label_names: None,
        }
    }
}

enum RawLabel {
    Index(usize),
    Name(String),
}

/// Reads a JSONL corpus; each line holds id, timestamp, text and an optional label.
pub fn load_corpus(path: &Path, schema: &CorpusSchema) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<(Post, Option<RawLabel>, usize)> = Vec::new();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let obj: Value =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, format!("invalid JSON: {e}")))?;
        let obj = obj
            .as_object()
            .ok_or_else(|| parse_err(lineno, "expected a JSON object".into()))?;
        let field = |name: &str| {
            obj.get(name)
                .ok_or_else(|| parse_err(lineno, format!("missing field `{name}`")))
        };
        let id = match field(&schema.id_field)? {
            Value::String(s) => s.clone(),
            Value::Number(n) => n.to_string(),
            _ => return Err(parse_err(lineno, format!("`{}` must be a string", schema.id_field))),
        };
        let timestamp = field(&schema.timestamp_field)?
            .as_i64()
            .filter(|t| *t >= 0)
            .ok_or_else(|| {
                parse_err(
                    lineno,
                    format!("`{}` must be a non-negative integer", schema.timestamp_field),
                )
            })?;
        let text = field(&schema.text_field)?
            .as_str()
            .ok_or_else(|| parse_err(lineno, format!("`{}` must be a string", schema.text_field)))?;
        let tokens = tokenize::tokenize(text);
        if tokens.is_empty() {
            return Err(parse_err(lineno, "text has no tokens after preprocessing".into()));
        }
        let raw = match obj.get(&schema.label_field) {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(RawLabel::Name(s.clone())),
            Some(Value::Number(n)) => Some(RawLabel::Index(
                n.as_u64()
                    .ok_or_else(|| parse_err(lineno, "label must be a non-negative integer".into()))?
                    as usize,
            )),
            Some(_) => return Err(parse_err(lineno, "label must be a string or integer".into())),
        };
        rows.push((
            Post {
                id,
                timestamp,
                tokens,
                label: None,
            },
            raw,
            lineno,
        ));
    }

    let (num_classes, names) = resolve_label_space(&rows, schema)?;
    let index: BTreeMap<&str, usize> = names
        .iter()
        .flatten()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let mut posts = Vec::with_capacity(rows.len());
    for (mut post, raw, lineno) in rows {
        post.label = match raw {
            None => None,
            Some(RawLabel::Index(i)) => Some(i),
            Some(RawLabel::Name(n)) => Some(*index.get(n.as_str()).ok_or_else(|| {
                Error::Schema(format!("line {lineno}: unknown label `{n}`"))
            })?),
        };
        posts.push(post);
    }
    Corpus::new(posts, num_classes, names)
}

fn resolve_label_space(
    rows: &[(Post, Option<RawLabel>, usize)],
    schema: &CorpusSchema,
) -> Result<(usize, Option<Vec<String>>)> {
    if let Some(names) = &schema.label_names {
        if names.is_empty() {
            return Err(Error::Schema("label_names is empty".into()));
        }
        return Ok((names.len(), Some(names.clone())));
    }
    let mut ints = BTreeSet::new();
    let mut strs = BTreeSet::new();
    for (_, raw, _) in rows {
        match raw {
            Some(RawLabel::Index(i)) => {
                ints.insert(*i);
            }
            Some(RawLabel::Name(n)) => {
                strs.insert(n.clone());
            }
            None => {}
        }
    }
    match (ints.is_empty(), strs.is_empty()) {
        (false, false) => Err(Error::Schema("mixed integer and string labels".into())),
        (true, false) => {
            let names: Vec<String> = strs.into_iter().collect();
            Ok((names.len(), Some(names)))
        }
        (false, true) => Ok((ints.last().map_or(1, |m| m + 1), None)),
        (true, true) => Ok((1, None)),
    }
}
