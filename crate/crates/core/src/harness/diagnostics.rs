use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::config::DiagnosticsConfig;
use crate::adapt::ModelBundle;
use crate::corpus::{build_vocabulary, english_stopwords, overlap_matrix, Corpus, Post, TimeSlices, SLICE_NAMES};
use crate::encoder::{attention_weights, encode, EncoderKind};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::rng::derive_seed;
use crate::vae::{top_words_per_topic, train_vae, TopicWords, VaeModel};

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsFiles {
    pub overlap: PathBuf,
    pub topics: PathBuf,
    pub attention: Vec<PathBuf>,
}

/// The five timeline periods: all of t0, then t1..t4.
pub fn periods(slices: &TimeSlices) -> Vec<(&'static str, Corpus)> {
    let mut out = vec![(SLICE_NAMES[0], slices.t0_all())];
    for (i, s) in slices.slices.iter().enumerate() {
        out.push((SLICE_NAMES[i + 1], s.clone()));
    }
    out
}

pub fn overlap_csv(matrix: &[Vec<f64>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["slice".to_string()];
    header.extend(SLICE_NAMES.iter().take(matrix.len()).map(|s| s.to_string()));
    w.write_record(&header)?;
    for (i, row) in matrix.iter().enumerate() {
        let mut rec = vec![SLICE_NAMES[i].to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Fits a separate topic model on one period and lists its topic words.
pub fn period_topics(
    period: &Corpus,
    bundle: &ModelBundle,
    topics: usize,
    n_words: usize,
    seed: u64,
) -> Result<Vec<TopicWords>> {
    let cfg = &bundle.meta.config;
    let vocab = build_vocabulary(&[period], cfg.vocab.min_freq, cfg.vocab.max_size, &english_stopwords())?;
    let vae_cfg = crate::vae::VaeConfig {
        topics,
        ..cfg.vae.clone()
    };
    let mut model = VaeModel::new(vocab.len(), &vae_cfg, seed)?;
    let bows: Vec<_> = period
        .posts
        .iter()
        .map(|p| crate::corpus::vectorize_bow(p, &vocab))
        .collect();
    train_vae(&bows, &mut model, &vae_cfg, seed)?;
    top_words_per_topic(&model, &vocab, n_words)
}

/// Token-by-token attention of one post as CSV (header row of tokens, then
/// one row per query token).
pub fn attention_csv(post: &Post, bundle: &ModelBundle) -> Result<String> {
    let clf = &bundle.classifier;
    let encoded = encode(post, &clf.vocab, &clf.params, &clf.config.encoder)?;
    let attn = attention_weights(&encoded)?;
    let n = attn.shape()[0];
    let tokens = &post.tokens[..n];
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["token".to_string()];
    header.extend(tokens.iter().cloned());
    w.write_record(&header)?;
    for (i, t) in tokens.iter().enumerate() {
        let mut rec = vec![t.clone()];
        rec.extend(attn.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes `overlap.csv`, `topics.json` and one `attn_<post_id>.csv` per
/// requested id into `out`.
pub fn export_diagnostics(
    bundle: &ModelBundle,
    slices: &TimeSlices,
    out: &Path,
    config: &DiagnosticsConfig,
    seed: u64,
) -> Result<DiagnosticsFiles> {
    if !config.attention_ids.is_empty() && bundle.classifier.config.encoder.kind != EncoderKind::TinyAttention {
        return Err(Error::Unsupported(
            "attention export requires a tiny_attention bundle".into(),
        ));
    }
    let periods = periods(slices);
    let by_id: BTreeMap<&str, &Post> = periods
        .iter()
        .flat_map(|(_, c)| c.posts.iter())
        .map(|p| (p.id.as_str(), p))
        .collect();
    let attention_posts: Vec<&Post> = config
        .attention_ids
        .iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::InvalidInput(format!("no post with id `{id}`")))
        })
        .collect::<Result<_>>()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let refs: Vec<&Corpus> = periods.iter().map(|(_, c)| c).collect();
    let matrix = overlap_matrix(&refs, config.overlap_top_k, &english_stopwords())?;
    let overlap = out.join("overlap.csv");
    write_atomic(&overlap, overlap_csv(&matrix)?.as_bytes())?;

    let k = match bundle.meta.topics {
        0 => bundle.meta.config.vae.topics,
        k => k,
    };
    let mut topics_json: BTreeMap<String, Vec<TopicWords>> = BTreeMap::new();
    for (name, period) in &periods {
        let s = derive_seed(seed, &format!("topics_{name}"));
        topics_json.insert(name.to_string(), period_topics(period, bundle, k, config.topic_words, s)?);
    }
    if let Some(v) = &bundle.classifier.vae {
        topics_json.insert("model".into(), top_words_per_topic(&v.model, &v.vocab, config.topic_words)?);
    }
    let topics = out.join("topics.json");
    let mut text = serde_json::to_string_pretty(&topics_json)?;
    text.push('\n');
    write_atomic(&topics, text.as_bytes())?;

    let mut attention = Vec::new();
    for post in attention_posts {
        let path = out.join(format!("attn_{}.csv", file_safe(&post.id)));
        write_atomic(&path, attention_csv(post, bundle)?.as_bytes())?;
        attention.push(path);
    }
    Ok(DiagnosticsFiles {
        overlap,
        topics,
        attention,
    })
}
