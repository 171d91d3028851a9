//! Fused classifier: `r = ReLU(W_mlp·[b; z] + b_mlp)`, `y = softmax(W_out·r + b_out)`.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::corpus::{vectorize_bow, BowVector, Corpus, Post, Vocabulary};
use crate::diffcore::{Adam, ParameterStore, Tape, Tensor, Var};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::vae::{self, VaeModel};

pub const FUSE_W: &str = "fuse.w";
pub const FUSE_B: &str = "fuse.b";
pub const OUT_W: &str = "out.w";
pub const OUT_B: &str = "out.b";

const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub encoder: EncoderConfig,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            encoder: EncoderConfig::default(),
            hidden: 128,
            epochs: 40,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "classifier hidden, epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("classifier lr must be positive".into()));
        }
        Ok(())
    }
}

/// A VAE plus the vocabulary its BoW inputs are built over.
#[derive(Clone, Debug, PartialEq)]
pub struct AttachedVae {
    pub model: VaeModel,
    pub vocab: Vocabulary,
}

impl AttachedVae {
    pub fn bows<'a>(&self, posts: impl IntoIterator<Item = &'a Post>) -> Vec<BowVector> {
        posts.into_iter().map(|p| vectorize_bow(p, &self.vocab)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub num_classes: usize,
    /// Width of `z_s`; zero when the classifier never takes topic features.
    pub topics: usize,
    pub vocab: Vocabulary,
    pub params: ParameterStore,
    pub vae: Option<AttachedVae>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub label: usize,
}

impl Classifier {
    pub fn new(
        config: ClassifierConfig,
        vocab: Vocabulary,
        num_classes: usize,
        topics: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let mut rng = crate::rng::stream(seed, "clf_init");
        let mut params = ParameterStore::new();
        encoder::init_params(&mut params, &config.encoder, vocab.len(), &mut rng)?;
        let input = config.encoder.embed_dim + topics;
        let h = config.hidden;
        params.insert(FUSE_W, Tensor::randn(&[h, input], (2.0 / input as f64).sqrt(), &mut rng))?;
        params.insert(FUSE_B, Tensor::zeros(&[h]))?;
        params.insert(
            OUT_W,
            Tensor::randn(&[num_classes, h], (1.0 / h as f64).sqrt(), &mut rng),
        )?;
        params.insert(OUT_B, Tensor::zeros(&[num_classes]))?;
        Ok(Classifier {
            config,
            num_classes,
            topics,
            vocab,
            params,
            vae: None,
        })
    }

    pub fn attach_vae(&mut self, vae: AttachedVae) -> Result<()> {
        if vae.model.topics != self.topics {
            return Err(Error::Config(format!(
                "vae has {} topics, classifier expects {}",
                vae.model.topics, self.topics
            )));
        }
        if vae.vocab.len() != vae.model.vocab_size {
            return Err(Error::dim("vae vocabulary does not match the vae input size"));
        }
        self.vae = Some(vae);
        Ok(())
    }

    pub fn detach_vae(&mut self) -> Option<AttachedVae> {
        self.vae.take()
    }

    /// Builds the probability node `[n, C]` for a batch.
    fn forward(
        &self,
        tape: &mut Tape,
        posts: &[&Post],
        bows: Option<&[BowVector]>,
        trainable: bool,
        vae_trainable: bool,
    ) -> Result<Var> {
        let ids: Vec<Vec<usize>> = posts
            .iter()
            .map(|p| {
                if p.tokens.is_empty() {
                    Err(Error::InvalidInput(format!("post `{}` has no tokens", p.id)))
                } else {
                    Ok(encoder::token_ids(&p.tokens, &self.vocab))
                }
            })
            .collect::<Result<_>>()?;
        let params = &self.params;
        let vae_params = self.vae.as_ref().map(|v| &v.model.params);
        let (b, _) = encoder::encode_batch(tape, params, &self.config.encoder, &ids, trainable)?;
        let x = if self.topics == 0 {
            b
        } else {
            let z = match (vae_params, bows) {
                (Some(vp), Some(bows)) => {
                    let rows = bows.iter().map(|v| v.counts().clone()).collect();
                    vae::encode_nodes(tape, vp, rows, vae_trainable)?.0
                }
                (Some(_), None) => return Err(Error::InvalidInput("missing vae inputs".into())),
                (None, _) => tape.constant(Tensor::zeros(&[posts.len(), self.topics])),
            };
            tape.concat(b, z)?
        };
        let leaf = |tape: &mut Tape, name: &str| {
            if trainable {
                tape.param(params, name)
            } else {
                tape.frozen(params, name)
            }
        };
        let fw = leaf(tape, FUSE_W)?;
        let fb = leaf(tape, FUSE_B)?;
        let r = tape.affine(x, fw, fb)?;
        let r = tape.relu(r);
        let ow = leaf(tape, OUT_W)?;
        let ob = leaf(tape, OUT_B)?;
        let logits = tape.affine(r, ow, ob)?;
        Ok(tape.softmax(logits))
    }

    fn predict_chunk(&self, posts: &[&Post]) -> Result<Vec<Prediction>> {
        let bows = self.vae.as_ref().map(|v| v.bows(posts.iter().copied()));
        let mut tape = Tape::new();
        let p = self.forward(&mut tape, posts, bows.as_deref(), false, false)?;
        let p = tape.value(p);
        Ok((0..posts.len())
            .map(|i| {
                let row = p.row(i).to_vec();
                Prediction {
                    label: argmax(&row),
                    probabilities: row,
                }
            })
            .collect())
    }

    /// Batched inference; fans out across threads for large inputs.
    pub fn predict(&self, posts: &[Post]) -> Result<Vec<Prediction>> {
        let refs: Vec<&Post> = posts.iter().collect();
        let chunks: Vec<Vec<Prediction>> = refs
            .par_chunks(EVAL_CHUNK)
            .map(|c| self.predict_chunk(c))
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    /// Fraction of labeled posts predicted correctly.
    pub fn accuracy(&self, corpus: &Corpus) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::InvalidInput("accuracy over an empty corpus".into()));
        }
        let preds = self.predict(&corpus.posts)?;
        let mut correct = 0usize;
        for (p, post) in preds.iter().zip(&corpus.posts) {
            let gold = post
                .label
                .ok_or_else(|| Error::InvalidInput(format!("post `{}` is unlabeled", post.id)))?;
            correct += usize::from(p.label == gold);
        }
        Ok(correct as f64 / corpus.len() as f64)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn classify(post: &Post, clf: &Classifier) -> Result<Prediction> {
    Ok(clf.predict_chunk(&[post])?.remove(0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPair {
    pub post: Post,
    pub label: usize,
    pub weight: f64,
    pub pseudo: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingSet {
    pub pairs: Vec<LabeledPair>,
}

impl TrainingSet {
    /// Gold pairs (weight 1) from every post of a labeled corpus.
    pub fn from_gold(corpus: &Corpus) -> Result<Self> {
        let pairs = corpus
            .posts
            .iter()
            .map(|p| {
                let label = p
                    .label
                    .ok_or_else(|| Error::InvalidInput(format!("gold post `{}` is unlabeled", p.id)))?;
                Ok(LabeledPair {
                    post: p.clone(),
                    label,
                    weight: 1.0,
                    pseudo: false,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TrainingSet { pairs })
    }

    /// Appends pseudo pairs, skipping any post id already present as gold.
    pub fn with_pseudo(mut self, pseudo: Vec<LabeledPair>) -> Self {
        let gold: BTreeSet<String> = self
            .pairs
            .iter()
            .filter(|p| !p.pseudo)
            .map(|p| p.post.id.clone())
            .collect();
        self.pairs
            .extend(pseudo.into_iter().filter(|p| !gold.contains(&p.post.id)));
        self
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn num_pseudo(&self) -> usize {
        self.pairs.iter().filter(|p| p.pseudo).count()
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        for p in &self.pairs {
            if p.label >= num_classes {
                return Err(Error::InvalidInput(format!(
                    "label {} of `{}` out of range for {num_classes} classes",
                    p.label, p.post.id
                )));
            }
            if !(p.weight >= 0.0) {
                return Err(Error::InvalidInput(format!("negative weight on `{}`", p.post.id)));
            }
        }
        Ok(())
    }
}

/// Weighted sum of per-class binary cross-entropies over the pairs.
pub fn classification_loss(pairs: &[LabeledPair], clf: &Classifier) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = loss_node(&mut tape, clf, pairs, false)?;
    Ok(tape.value(loss).item())
}

fn loss_node(tape: &mut Tape, clf: &Classifier, pairs: &[LabeledPair], vae_trainable: bool) -> Result<Var> {
    let posts: Vec<&Post> = pairs.iter().map(|p| &p.post).collect();
    let bows = clf.vae.as_ref().map(|v| v.bows(posts.iter().copied()));
    let p = clf.forward(tape, &posts, bows.as_deref(), true, vae_trainable)?;
    tape.binary_cross_entropy(
        p,
        pairs.iter().map(|p| p.label).collect(),
        pairs.iter().map(|p| p.weight).collect(),
    )
}

/// Joint objective `L_p + mu_loss · L_vae` on one batch, as a tape node.
pub fn joint_loss_node(
    tape: &mut Tape,
    clf: &Classifier,
    pairs: &[LabeledPair],
    mu_loss: f64,
    noise: Option<&Tensor>,
    vae_trainable: bool,
) -> Result<Var> {
    let lp = loss_node(tape, clf, pairs, vae_trainable)?;
    let (Some(vae), Some(noise)) = (clf.vae.as_ref(), noise) else {
        return Ok(lp);
    };
    if mu_loss == 0.0 {
        return Ok(lp);
    }
    let bows = vae.bows(pairs.iter().map(|p| &p.post));
    let refs: Vec<&BowVector> = bows.iter().collect();
    let lv = vae::batch_loss(tape, &vae.model.params, &refs, noise, vae_trainable)?;
    let lv = tape.scale(lv, mu_loss);
    tape.add(lp, lv)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Joint weight on the VAE loss; 0 trains on `L_p` alone.
    pub mu_loss: f64,
    /// Whether the attached VAE is updated.
    pub vae_trainable: bool,
}

impl TrainOptions {
    pub fn from_config(c: &ClassifierConfig) -> Self {
        TrainOptions {
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            mu_loss: 0.0,
            vae_trainable: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// 1-based epoch of the retained checkpoint.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub val_accuracy: Vec<f64>,
}

/// Minibatch training with per-epoch validation; `clf` ends holding the
/// checkpoint with the highest validation accuracy (earliest on ties).
pub fn train_supervised(
    train: &TrainingSet,
    val: &Corpus,
    clf: &mut Classifier,
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainReport> {
    if opts.epochs == 0 || opts.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    if !(opts.mu_loss >= 0.0) {
        return Err(Error::Config("mu_loss must be non-negative".into()));
    }
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptyPartition {
            partition: "validation".into(),
        });
    }
    train.validate(clf.num_classes)?;
    let vae_trainable = opts.vae_trainable && clf.vae.is_some();
    let mut shuffle_rng = crate::rng::stream(seed, "clf_shuffle");
    let mut noise_rng = crate::rng::stream(seed, "joint_noise");
    let mut adam = Adam::new(opts.lr);
    let mut vae_adam = Adam::new(opts.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(usize, f64, ParameterStore, Option<ParameterStore>)> = None;
    let mut trace = Vec::with_capacity(opts.epochs);
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(opts.batch_size) {
            let pairs: Vec<LabeledPair> = chunk.iter().map(|&i| train.pairs[i].clone()).collect();
            let noise = match &clf.vae {
                Some(v) if opts.mu_loss > 0.0 => {
                    Some(vae::standard_normal(&[pairs.len(), v.model.topics], &mut noise_rng))
                }
                _ => None,
            };
            let mut tape = Tape::new();
            let loss = joint_loss_node(&mut tape, clf, &pairs, opts.mu_loss, noise.as_ref(), vae_trainable)?;
            let grads = tape.backward(loss)?;
            clf.params.accumulate(&grads);
            adam.step(&mut clf.params);
            if vae_trainable {
                let vp = &mut clf.vae.as_mut().expect("checked").model.params;
                vp.accumulate(&grads);
                vae_adam.step(vp);
            }
        }
        let acc = clf.accuracy(val)?;
        trace.push(acc);
        if best.as_ref().is_none_or(|b| acc > b.1) {
            best = Some((
                epoch,
                acc,
                clf.params.clone(),
                clf.vae.as_ref().map(|v| v.model.params.clone()),
            ));
        }
    }
    let (best_epoch, best_val_accuracy, params, vae_params) = best.expect("at least one epoch");
    clf.params = params;
    if let (Some(v), Some(p)) = (clf.vae.as_mut(), vae_params) {
        v.model.params = p;
    }
    log::debug!("best epoch {best_epoch}, val accuracy {best_val_accuracy:.4}");
    Ok(TrainReport {
        best_epoch,
        best_val_accuracy,
        val_accuracy: trace,
    })
}

/// Labels every trans post with the classifier's prediction, dropping those
/// whose top probability is below `threshold`.
pub fn pseudo_label(
    trans: &Corpus,
    clf: &Classifier,
    threshold: f64,
    weight: f64,
) -> Result<Vec<LabeledPair>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    let preds = clf.predict(&trans.posts)?;
    Ok(trans
        .posts
        .iter()
        .zip(preds)
        .filter(|(_, p)| p.probabilities[p.label] >= threshold)
        .map(|(post, p)| LabeledPair {
            post: Post {
                label: None,
                ..post.clone()
            },
            label: p.label,
            weight,
            pseudo: true,
        })
        .collect())
}
