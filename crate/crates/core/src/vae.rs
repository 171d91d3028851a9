//! Bag-of-words variational auto-encoder over a fixed vocabulary.
//!
//! `h = ReLU(f_e(v))`, `mu = f_mu(h)`, `log_sigma = f_sigma(h)`,
//! `z = mu + exp(log_sigma) * eps`, `theta = softmax(z)`,
//! `v_hat = softmax(f_phi(theta))`. The loss is the negated ELBO: KL to the
//! standard normal plus the multinomial NLL of the observed counts.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{BowVector, Vocabulary};
use crate::diffcore::{
    kl_standard_normal, log_softmax_rows, softmax_rows, Adam, ParameterStore, SparseRow, Tape,
    Tensor, Var,
};
use crate::error::{Error, Result};

pub const ENC_W: &str = "vae.enc.w";
pub const ENC_B: &str = "vae.enc.b";
pub const MU_W: &str = "vae.mu.w";
pub const MU_B: &str = "vae.mu.b";
pub const LS_W: &str = "vae.ls.w";
pub const LS_B: &str = "vae.ls.b";
pub const DEC_W: &str = "vae.dec.w";
pub const DEC_B: &str = "vae.dec.b";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub topics: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            topics: 50,
            hidden: 128,
            // Shorter or slower schedules stall on the uniform-topic plateau.
            epochs: 100,
            batch_size: 32,
            lr: 3e-3,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.topics == 0 || self.hidden == 0 {
            return Err(Error::Config("vae topics and hidden must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("vae epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("vae lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    pub vocab_size: usize,
    pub topics: usize,
    pub hidden: usize,
    pub params: ParameterStore,
}

impl VaeModel {
    pub fn new(vocab_size: usize, config: &VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::InvalidInput("vae needs a non-empty vocabulary".into()));
        }
        let (v, h, k) = (vocab_size, config.hidden, config.topics);
        let mut rng = crate::rng::stream(seed, "vae_init");
        let mut p = ParameterStore::new();
        p.insert(ENC_W, Tensor::randn(&[h, v], (2.0 / v as f64).sqrt(), &mut rng))?;
        p.insert(ENC_B, Tensor::zeros(&[h]))?;
        p.insert(MU_W, Tensor::randn(&[k, h], (1.0 / h as f64).sqrt(), &mut rng))?;
        p.insert(MU_B, Tensor::zeros(&[k]))?;
        p.insert(LS_W, Tensor::randn(&[k, h], 0.01, &mut rng))?;
        p.insert(LS_B, Tensor::zeros(&[k]))?;
        p.insert(DEC_W, Tensor::randn(&[v, k], 0.1, &mut rng))?;
        p.insert(DEC_B, Tensor::zeros(&[v]))?;
        Self::from_params(p)
    }

    /// Rebuilds a model from a store, inferring and checking the shape chain.
    pub fn from_params(params: ParameterStore) -> Result<Self> {
        let enc = params.get(ENC_W)?.shape().to_vec();
        let mu = params.get(MU_W)?.shape().to_vec();
        let dec = params.get(DEC_W)?.shape().to_vec();
        if enc.len() != 2 || mu.len() != 2 || dec.len() != 2 {
            return Err(Error::dim("vae weights must be matrices"));
        }
        let (h, v, k) = (enc[0], enc[1], mu[0]);
        let chain_ok = mu[1] == h
            && params.get(LS_W)?.shape() == [k, h]
            && dec == [v, k]
            && params.get(ENC_B)?.shape() == [h]
            && params.get(MU_B)?.shape() == [k]
            && params.get(LS_B)?.shape() == [k]
            && params.get(DEC_B)?.shape() == [v];
        if !chain_ok {
            return Err(Error::dim("vae layer shapes do not chain V→H→K→V"));
        }
        Ok(VaeModel {
            vocab_size: v,
            topics: k,
            hidden: h,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_params(ParameterStore::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopicOutcome {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub z: Vec<f64>,
    pub theta: Vec<f64>,
    /// Filled by [`vae_forward`]; [`vae_encode`] leaves it empty.
    pub v_hat: Option<Vec<f64>>,
}

/// Tape nodes of a batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct VaeNodes {
    pub mu: Var,
    pub log_sigma: Var,
    pub z: Var,
    pub theta: Var,
    pub log_v_hat: Var,
}

fn leaf(tape: &mut Tape, store: &ParameterStore, name: &str, trainable: bool) -> Result<Var> {
    if trainable {
        tape.param(store, name)
    } else {
        tape.frozen(store, name)
    }
}

/// Encoder half only: returns `(mu, log_sigma)` as `[n, K]` nodes.
pub fn encode_nodes(
    tape: &mut Tape,
    store: &ParameterStore,
    rows: Vec<SparseRow>,
    trainable: bool,
) -> Result<(Var, Var)> {
    let ew = leaf(tape, store, ENC_W, trainable)?;
    let eb = leaf(tape, store, ENC_B, trainable)?;
    let h = tape.sparse_affine(rows, ew, eb)?;
    let h = tape.relu(h);
    let mw = leaf(tape, store, MU_W, trainable)?;
    let mb = leaf(tape, store, MU_B, trainable)?;
    let sw = leaf(tape, store, LS_W, trainable)?;
    let sb = leaf(tape, store, LS_B, trainable)?;
    let mu = tape.affine(h, mw, mb)?;
    let log_sigma = tape.affine(h, sw, sb)?;
    Ok((mu, log_sigma))
}

/// Full pass over a batch of sparse BoW rows with caller-supplied `[n, K]` noise.
pub fn forward_nodes(
    tape: &mut Tape,
    store: &ParameterStore,
    rows: Vec<SparseRow>,
    noise: &Tensor,
    trainable: bool,
) -> Result<VaeNodes> {
    let (mu, log_sigma) = encode_nodes(tape, store, rows, trainable)?;
    let z = tape.gaussian_sample(mu, log_sigma, noise)?;
    let theta = tape.softmax(z);
    let dw = leaf(tape, store, DEC_W, trainable)?;
    let db = leaf(tape, store, DEC_B, trainable)?;
    let logits = tape.affine(theta, dw, db)?;
    let log_v_hat = tape.log_softmax(logits);
    Ok(VaeNodes {
        mu,
        log_sigma,
        z,
        theta,
        log_v_hat,
    })
}

/// Mean negated ELBO over the batch.
pub fn batch_loss(
    tape: &mut Tape,
    store: &ParameterStore,
    bows: &[&BowVector],
    noise: &Tensor,
    trainable: bool,
) -> Result<Var> {
    let rows: Vec<SparseRow> = bows.iter().map(|b| b.counts().clone()).collect();
    let nodes = forward_nodes(tape, store, rows.clone(), noise, trainable)?;
    let kl = tape.kl_standard_normal(nodes.mu, nodes.log_sigma)?;
    let nll = tape.sparse_nll(nodes.log_v_hat, rows)?;
    let total = tape.add(kl, nll)?;
    Ok(tape.scale(total, 1.0 / bows.len().max(1) as f64))
}

fn check_dim(v: &BowVector, model: &VaeModel) -> Result<()> {
    if v.dimension() != model.vocab_size {
        return Err(Error::dim(format!(
            "bow dimension {} does not match vae vocabulary {}",
            v.dimension(),
            model.vocab_size
        )));
    }
    Ok(())
}

fn check_noise(noise: &[f64], model: &VaeModel) -> Result<()> {
    if noise.len() != model.topics {
        return Err(Error::dim(format!(
            "noise has {} entries, expected {}",
            noise.len(),
            model.topics
        )));
    }
    Ok(())
}

pub fn vae_encode(v: &BowVector, model: &VaeModel, noise: &[f64]) -> Result<TopicOutcome> {
    check_dim(v, model)?;
    check_noise(noise, model)?;
    let mut tape = Tape::new();
    let (mu, ls) = encode_nodes(&mut tape, &model.params, vec![v.counts().clone()], false)?;
    let mu = tape.value(mu).row(0).to_vec();
    let log_sigma = tape.value(ls).row(0).to_vec();
    let z: Vec<f64> = mu
        .iter()
        .zip(&log_sigma)
        .zip(noise)
        .map(|((m, s), e)| m + s.exp() * e)
        .collect();
    let theta = softmax_rows(&Tensor::vector(z.clone())).into_data();
    Ok(TopicOutcome {
        mu,
        log_sigma,
        z,
        theta,
        v_hat: None,
    })
}

pub fn vae_decode(theta: &[f64], model: &VaeModel) -> Result<Vec<f64>> {
    if theta.len() != model.topics {
        return Err(Error::dim(format!(
            "theta has {} entries, expected {}",
            theta.len(),
            model.topics
        )));
    }
    let logits = crate::diffcore::affine_forward(
        &Tensor::vector(theta.to_vec()),
        model.params.get(DEC_W)?,
        model.params.get(DEC_B)?,
    )?;
    Ok(softmax_rows(&logits).into_data())
}

/// Encode then decode.
pub fn vae_forward(v: &BowVector, model: &VaeModel, noise: &[f64]) -> Result<TopicOutcome> {
    let mut out = vae_encode(v, model, noise)?;
    out.v_hat = Some(vae_decode(&out.theta, model)?);
    Ok(out)
}

/// Negated ELBO of one document. A zero BoW contributes no NLL.
pub fn vae_loss(v: &BowVector, outcome: &TopicOutcome) -> Result<f64> {
    let v_hat = outcome
        .v_hat
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("vae_loss needs a decoded outcome".into()))?;
    if v_hat.len() != v.dimension() {
        return Err(Error::dim("v_hat and bow dimensions differ"));
    }
    let kl = kl_standard_normal(
        &Tensor::vector(outcome.mu.clone()),
        &Tensor::vector(outcome.log_sigma.clone()),
    )?;
    let nll: f64 = v
        .counts()
        .iter()
        .map(|&(j, c)| -c * v_hat[j].max(crate::diffcore::PROB_EPS).ln())
        .sum();
    Ok(kl + nll)
}

/// Minibatch Adam on the mean negated ELBO; returns the per-epoch mean loss.
pub fn train_vae(
    bows: &[BowVector],
    model: &mut VaeModel,
    config: &VaeConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    config.validate()?;
    if bows.is_empty() {
        return Err(Error::InvalidInput("train_vae needs at least one document".into()));
    }
    for b in bows {
        check_dim(b, model)?;
    }
    let mut shuffle_rng = crate::rng::stream(seed, "vae_shuffle");
    let mut noise_rng = crate::rng::stream(seed, "vae_noise");
    let mut adam = Adam::new(config.lr);
    let mut order: Vec<usize> = (0..bows.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&BowVector> = chunk.iter().map(|&i| &bows[i]).collect();
            let noise = standard_normal(&[batch.len(), model.topics], &mut noise_rng);
            let mut tape = Tape::new();
            let loss = batch_loss(&mut tape, &model.params, &batch, &noise, true)?;
            total += tape.value(loss).item() * batch.len() as f64;
            let grads = tape.backward(loss)?;
            model.params.accumulate(&grads);
            adam.step(&mut model.params);
        }
        trace.push(total / bows.len() as f64);
    }
    Ok(trace)
}

pub fn standard_normal<R: rand::Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Feature `z_s` at inference: the posterior mean (zero noise), `[n, K]`.
pub fn posterior_means(bows: &[&BowVector], model: &VaeModel) -> Result<Tensor> {
    for b in bows {
        check_dim(b, model)?;
    }
    let mut tape = Tape::new();
    let rows = bows.iter().map(|b| b.counts().clone()).collect();
    let (mu, _) = encode_nodes(&mut tape, &model.params, rows, false)?;
    Ok(tape.value(mu).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicWords {
    pub topic_id: usize,
    pub words: Vec<String>,
    pub probabilities: Vec<f64>,
}

/// Softmax over each topic's decoder column; full distribution per topic.
pub fn topic_word_distributions(model: &VaeModel) -> Result<Tensor> {
    let w = model.params.get(DEC_W)?;
    Ok(softmax_rows(&crate::diffcore::transpose(w)))
}

pub fn top_words_per_topic(model: &VaeModel, vocab: &Vocabulary, n: usize) -> Result<Vec<TopicWords>> {
    if vocab.len() != model.vocab_size {
        return Err(Error::dim(format!(
            "vocabulary has {} tokens, vae expects {}",
            vocab.len(),
            model.vocab_size
        )));
    }
    let n = if n > vocab.len() {
        log::warn!("requested {n} topic words but vocabulary has {}; truncating", vocab.len());
        vocab.len()
    } else {
        n
    };
    let dist = topic_word_distributions(model)?;
    let mut out = Vec::with_capacity(model.topics);
    for k in 0..model.topics {
        let row = dist.row(k);
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| {
            row[b]
                .total_cmp(&row[a])
                .then_with(|| vocab.token(a).cmp(vocab.token(b)))
        });
        idx.truncate(n);
        out.push(TopicWords {
            topic_id: k,
            words: idx.iter().map(|&i| vocab.token(i).to_string()).collect(),
            probabilities: idx.iter().map(|&i| row[i]).collect(),
        });
    }
    Ok(out)
}

pub fn write_topic_report(topics: &[TopicWords], path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(topics)?;
    bytes.push(b'\n');
    crate::io::write_atomic(path, &bytes)
}

/// Per-row log reconstruction probabilities, exposed for diagnostics.
pub fn log_reconstruction(theta: &Tensor, model: &VaeModel) -> Result<Tensor> {
    let logits = crate::diffcore::affine_forward(theta, model.params.get(DEC_W)?, model.params.get(DEC_B)?)?;
    Ok(log_softmax_rows(&logits))
}
