//! Post encoders producing the embedding `b_s`.
//!
//! Two trainable encoders are provided: a mean of token embeddings
//! (order-insensitive) and a single-head, single-layer self-attention encoder
//! whose attention matrix is kept for inspection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Post, Vocabulary};
use crate::diffcore::{ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const EMBED: &str = "enc.embed";
pub const PROJ_W: &str = "enc.proj.w";
pub const PROJ_B: &str = "enc.proj.b";
pub const ATTN_Q: &str = "enc.attn.q";
pub const ATTN_K: &str = "enc.attn.k";
pub const ATTN_V: &str = "enc.attn.v";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    BagOfEmbeddings,
    TinyAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub embed_dim: usize,
    /// Tokens beyond this are dropped (attention encoder only).
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::BagOfEmbeddings,
            embed_dim: 64,
            max_len: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::Config("embed_dim must be at least 2".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPost {
    pub b: Vec<f64>,
    /// Row-stochastic `L × L` matrix, attention encoder only.
    pub attention: Option<Tensor>,
}

/// Maps tokens to embedding rows; out-of-vocabulary tokens share the last
/// row (`vocab.len()`), a trained unknown-token embedding.
pub fn token_ids(tokens: &[String], vocab: &Vocabulary) -> Vec<usize> {
    let unk = vocab.len();
    tokens.iter().map(|t| vocab.get(t).unwrap_or(unk)).collect()
}

pub fn init_params<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    config: &EncoderConfig,
    vocab_size: usize,
    rng: &mut R,
) -> Result<()> {
    config.validate()?;
    let d = config.embed_dim;
    let scale = 1.0 / (d as f64).sqrt();
    store.insert(EMBED, Tensor::randn(&[vocab_size + 1, d], 0.1, rng))?;
    if config.kind == EncoderKind::TinyAttention {
        store.insert(ATTN_Q, Tensor::randn(&[d, d], 0.1 * scale, rng))?;
        store.insert(ATTN_K, Tensor::randn(&[d, d], 0.1 * scale, rng))?;
        store.insert(ATTN_V, Tensor::randn(&[d, d], scale, rng))?;
    }
    store.insert(PROJ_W, Tensor::randn(&[d, d], scale, rng))?;
    store.insert(PROJ_B, Tensor::zeros(&[d]))?;
    Ok(())
}

/// Sinusoidal position table `[len, d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * rate;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![len, d], data).expect("shape")
}

fn leaf(tape: &mut Tape, store: &ParameterStore, name: &str, trainable: bool) -> Result<Var> {
    if trainable {
        tape.param(store, name)
    } else {
        tape.frozen(store, name)
    }
}

/// Encodes a batch of token-id lists into `[n, embed_dim]`, also returning
/// the attention node of each post when the attention encoder is used.
pub fn encode_batch(
    tape: &mut Tape,
    store: &ParameterStore,
    config: &EncoderConfig,
    batch: &[Vec<usize>],
    trainable: bool,
) -> Result<(Var, Vec<Option<Var>>)> {
    if batch.iter().any(Vec::is_empty) {
        return Err(Error::InvalidInput("cannot encode an empty post".into()));
    }
    let embed = leaf(tape, store, EMBED, trainable)?;
    let (pooled, attention) = match config.kind {
        EncoderKind::BagOfEmbeddings => {
            let pooled = tape.embedding_bag(embed, batch.to_vec())?;
            (pooled, vec![None; batch.len()])
        }
        EncoderKind::TinyAttention => {
            let wq = leaf(tape, store, ATTN_Q, trainable)?;
            let wk = leaf(tape, store, ATTN_K, trainable)?;
            let wv = leaf(tape, store, ATTN_V, trainable)?;
            let d = config.embed_dim;
            let inv_sqrt_d = 1.0 / (d as f64).sqrt();
            let mut rows = Vec::with_capacity(batch.len());
            let mut attn = Vec::with_capacity(batch.len());
            for ids in batch {
                let ids: Vec<usize> = ids.iter().copied().take(config.max_len).collect();
                let len = ids.len();
                let x = tape.gather(embed, ids)?;
                let pos = tape.constant(sinusoidal_positions(len, d));
                let x = tape.add(x, pos)?;
                let q = tape.matmul(x, wq)?;
                let k = tape.matmul(x, wk)?;
                let v = tape.matmul(x, wv)?;
                let kt = tape.transpose(k)?;
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, inv_sqrt_d);
                let a = tape.softmax(scores);
                let h = tape.matmul(a, v)?;
                rows.push(tape.mean_rows(h)?);
                attn.push(Some(a));
            }
            (tape.stack_rows(&rows)?, attn)
        }
    };
    let w = leaf(tape, store, PROJ_W, trainable)?;
    let b = leaf(tape, store, PROJ_B, trainable)?;
    let projected = tape.affine(pooled, w, b)?;
    Ok((tape.relu(projected), attention))
}

/// Single-post inference.
pub fn encode(
    post: &Post,
    vocab: &Vocabulary,
    params: &ParameterStore,
    config: &EncoderConfig,
) -> Result<EncodedPost> {
    if post.tokens.is_empty() {
        return Err(Error::InvalidInput(format!("post `{}` has no tokens", post.id)));
    }
    let ids = token_ids(&post.tokens, vocab);
    let mut tape = Tape::new();
    let (b, attn) = encode_batch(&mut tape, params, config, &[ids], false)?;
    Ok(EncodedPost {
        b: tape.value(b).row(0).to_vec(),
        attention: attn[0].map(|a| tape.value(a).clone()),
    })
}

/// The stored attention matrix, aligned to the (truncated) input token order.
pub fn attention_weights(encoded: &EncodedPost) -> Result<&Tensor> {
    encoded.attention.as_ref().ok_or_else(|| {
        Error::Unsupported("attention weights require the tiny_attention encoder".into())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, Corpus};
    use crate::diffcore::finite_difference_check;
    use std::collections::BTreeSet;

    fn setup(kind: EncoderKind, d: usize) -> (Corpus, Vocabulary, ParameterStore, EncoderConfig) {
        let posts = ["a b c", "c a", "b b d e", "e"]
            .iter()
            .enumerate()
            .map(|(i, t)| Post {
                id: format!("p{i}"),
                timestamp: i as i64,
                tokens: t.split_whitespace().map(String::from).collect(),
                label: Some(0),
            })
            .collect();
        let corpus = Corpus::new(posts, 2, None).unwrap();
        let vocab = build_vocabulary(&[&corpus], 1, 100, &BTreeSet::new()).unwrap();
        let config = EncoderConfig {
            kind,
            embed_dim: d,
            max_len: 3,
        };
        let mut store = ParameterStore::new();
        let mut rng = crate::rng::stream(1, "test");
        init_params(&mut store, &config, vocab.len(), &mut rng).unwrap();
        (corpus, vocab, store, config)
    }

    #[test]
    fn single_token_identity_projection() {
        let (corpus, vocab, mut store, config) = setup(EncoderKind::BagOfEmbeddings, 4);
        *store.get_mut(PROJ_W).unwrap() = Tensor::identity(4);
        let post = &corpus.posts[3];
        let enc = encode(post, &vocab, &store, &config).unwrap();
        let row = vocab.get("e").unwrap();
        let expected: Vec<f64> = store.get(EMBED).unwrap().row(row).iter().map(|v| v.max(0.0)).collect();
        assert_eq!(enc.b, expected);
        assert!(attention_weights(&enc).is_err());
    }

    #[test]
    fn bag_is_permutation_invariant() {
        let (_, vocab, store, config) = setup(EncoderKind::BagOfEmbeddings, 6);
        let mk = |t: &[&str]| Post {
            id: "x".into(),
            timestamp: 0,
            tokens: t.iter().map(|s| s.to_string()).collect(),
            label: None,
        };
        let a = encode(&mk(&["a", "b", "d"]), &vocab, &store, &config).unwrap();
        let b = encode(&mk(&["d", "a", "b"]), &vocab, &store, &config).unwrap();
        assert_eq!(a.b, b.b);
    }

    #[test]
    fn attention_is_order_sensitive_and_row_stochastic() {
        let (_, vocab, store, config) = setup(EncoderKind::TinyAttention, 6);
        let mk = |t: &[&str]| Post {
            id: "x".into(),
            timestamp: 0,
            tokens: t.iter().map(|s| s.to_string()).collect(),
            label: None,
        };
        let a = encode(&mk(&["a", "b", "d"]), &vocab, &store, &config).unwrap();
        let b = encode(&mk(&["d", "a", "b"]), &vocab, &store, &config).unwrap();
        assert_ne!(a.b, b.b);
        let att = attention_weights(&a).unwrap();
        assert_eq!(att.shape(), &[3, 3]);
        for i in 0..3 {
            assert!((att.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        // Truncation to max_len.
        let long = encode(&mk(&["a", "b", "c", "d", "e"]), &vocab, &store, &config).unwrap();
        assert_eq!(attention_weights(&long).unwrap().shape(), &[3, 3]);
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let (_, vocab, mut store, config) = setup(EncoderKind::TinyAttention, 4);
        store.get_mut(ATTN_Q).unwrap().fill(0.0);
        let post = Post { id: "x".into(), timestamp: 0, tokens: vec!["a".into(), "b".into()], label: None };
        let enc = encode(&post, &vocab, &store, &config).unwrap();
        let att = enc.attention.unwrap();
        assert!(att.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn empty_post_rejected() {
        let (_, vocab, store, config) = setup(EncoderKind::BagOfEmbeddings, 4);
        let post = Post { id: "x".into(), timestamp: 0, tokens: vec![], label: None };
        assert!(encode(&post, &vocab, &store, &config).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [EncoderKind::BagOfEmbeddings, EncoderKind::TinyAttention] {
            let (corpus, vocab, store, config) = setup(kind, 4);
            let batch: Vec<Vec<usize>> = corpus.posts.iter().map(|p| token_ids(&p.tokens, &vocab)).collect();
            let err = finite_difference_check(&store, 1e-5, |tape, s| {
                let (b, _) = encode_batch(tape, s, &config, &batch, true)?;
                let sq = tape.mul(b, b)?;
                Ok(tape.sum(sq))
            })
            .unwrap();
            assert!(err < 1e-4, "{kind:?}: {err}");
        }
    }
}
