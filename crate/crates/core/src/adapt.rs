//! Adaptation strategies and the on-disk model bundle.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classify::{
    pseudo_label, train_supervised, AttachedVae, Classifier, ClassifierConfig, LabeledPair,
    TrainOptions, TrainReport, TrainingSet,
};
use crate::corpus::{build_vocabulary, english_stopwords, Corpus, TimeSlices, Vocabulary};
use crate::diffcore::ParameterStore;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::vae::{train_vae, VaeConfig, VaeModel};

pub const DEFAULT_MU_LOSS: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "BASE")]
    Base,
    #[serde(rename = "VAE_FEAT")]
    VaeFeat,
    #[serde(rename = "PL")]
    Pl,
    #[serde(rename = "S_PV")]
    SPv,
    #[serde(rename = "J_PV")]
    JPv,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Base,
        StrategyKind::VaeFeat,
        StrategyKind::Pl,
        StrategyKind::SPv,
        StrategyKind::JPv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Base => "BASE",
            StrategyKind::VaeFeat => "VAE_FEAT",
            StrategyKind::Pl => "PL",
            StrategyKind::SPv => "S_PV",
            StrategyKind::JPv => "J_PV",
        }
    }

    pub fn uses_vae(self) -> bool {
        matches!(self, StrategyKind::VaeFeat | StrategyKind::SPv | StrategyKind::JPv)
    }

    pub fn uses_pseudo_labels(self) -> bool {
        matches!(self, StrategyKind::Pl | StrategyKind::SPv | StrategyKind::JPv)
    }

    /// Whether the trans-data influences the model at all.
    pub fn uses_trans(self) -> bool {
        self != StrategyKind::Base
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s) || k.name().replace('_', "-").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    /// Joint loss weight; J_PV only (defaults to 1e-2).
    pub mu_loss: Option<f64>,
    /// Keep the VAE fixed during J_PV retraining.
    pub freeze_vae: bool,
}

impl Strategy {
    pub fn new(kind: StrategyKind) -> Self {
        Strategy {
            kind,
            mu_loss: None,
            freeze_vae: false,
        }
    }

    pub fn joint(mu_loss: f64, freeze_vae: bool) -> Self {
        Strategy {
            kind: StrategyKind::JPv,
            mu_loss: Some(mu_loss),
            freeze_vae,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != StrategyKind::JPv {
            if self.mu_loss.is_some() {
                return Err(Error::Config(format!("mu_loss is only valid for J_PV, not {}", self.kind)));
            }
            if self.freeze_vae {
                return Err(Error::Config(format!("freeze_vae is only valid for J_PV, not {}", self.kind)));
            }
        }
        if let Some(m) = self.mu_loss {
            if !(m >= 0.0) || !m.is_finite() {
                return Err(Error::Config(format!("mu_loss must be a finite value >= 0, got {m}")));
            }
        }
        Ok(())
    }

    pub fn effective_mu_loss(&self) -> f64 {
        match self.kind {
            StrategyKind::JPv => self.mu_loss.unwrap_or(DEFAULT_MU_LOSS),
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub min_freq: u64,
    pub max_size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            min_freq: 2,
            max_size: 20_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoConfig {
    /// Minimum top-class probability for a pseudo pair to be kept.
    pub threshold: f64,
    pub weight: f64,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig {
            threshold: 0.0,
            weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub classifier: ClassifierConfig,
    pub vae: VaeConfig,
    pub vocab: VocabConfig,
    pub pseudo: PseudoConfig,
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.classifier.validate()?;
        self.vae.validate()?;
        if self.vocab.min_freq == 0 || self.vocab.max_size == 0 {
            return Err(Error::Config("vocab min_freq and max_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pseudo.threshold) {
            return Err(Error::Config("pseudo threshold must lie in [0, 1]".into()));
        }
        if !(self.pseudo.weight >= 0.0) {
            return Err(Error::Config("pseudo weight must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptOutcome {
    pub classifier: Classifier,
    /// Pseudo pairs used in retraining (empty for BASE and VAE_FEAT).
    pub pseudo: Vec<LabeledPair>,
    pub initial: TrainReport,
    pub retrain: Option<TrainReport>,
    /// Per-epoch VAE pre-training loss, when a VAE was trained.
    pub vae_trace: Vec<f64>,
}

/// `t0_train` followed by the trans posts whose ids it does not already hold.
pub fn fit_corpus(t0_train: &Corpus, trans: &Corpus) -> Corpus {
    let ids: BTreeSet<&str> = t0_train.posts.iter().map(|p| p.id.as_str()).collect();
    let mut posts = t0_train.posts.clone();
    posts.extend(trans.posts.iter().filter(|p| !ids.contains(p.id.as_str())).cloned());
    t0_train.with_posts(posts)
}

/// Trains a VAE on the BoWs of `t0_train ∪ trans`.
pub fn fit_vae(
    t0_train: &Corpus,
    trans: &Corpus,
    config: &AdaptConfig,
    seed: u64,
) -> Result<(AttachedVae, Vec<f64>)> {
    let fit = fit_corpus(t0_train, trans);
    let vocab = build_vocabulary(&[&fit], config.vocab.min_freq, config.vocab.max_size, &english_stopwords())?;
    let mut model = VaeModel::new(vocab.len(), &config.vae, derive_seed(seed, "vae"))?;
    let attached = AttachedVae { model: model.clone(), vocab };
    let bows = attached.bows(&fit.posts);
    let trace = train_vae(&bows, &mut model, &config.vae, derive_seed(seed, "vae"))?;
    Ok((
        AttachedVae {
            model,
            vocab: attached.vocab,
        },
        trace,
    ))
}

/// The classifier trained on gold `t0_train` only, with the VAE attached when
/// the strategy uses one. `vae` must be supplied exactly for VAE strategies.
pub fn initial_classifier(
    history: &TimeSlices,
    trans: &Corpus,
    kind: StrategyKind,
    vae: Option<AttachedVae>,
    config: &AdaptConfig,
    seed: u64,
) -> Result<(Classifier, TrainReport)> {
    let fit = if kind.uses_pseudo_labels() {
        fit_corpus(&history.t0_train, trans)
    } else {
        history.t0_train.clone()
    };
    let vocab = build_vocabulary(&[&fit], config.vocab.min_freq, config.vocab.max_size, &BTreeSet::new())?;
    let topics = if kind.uses_vae() { config.vae.topics } else { 0 };
    let mut clf = Classifier::new(
        config.classifier.clone(),
        vocab,
        history.t0_train.num_classes,
        topics,
        derive_seed(seed, "classifier"),
    )?;
    match (kind.uses_vae(), vae) {
        (true, Some(v)) => clf.attach_vae(v)?,
        (false, None) => {}
        (true, None) => return Err(Error::Config(format!("{kind} needs a trained vae"))),
        (false, Some(_)) => return Err(Error::Config(format!("{kind} does not take a vae"))),
    }
    let gold = TrainingSet::from_gold(&history.t0_train)?;
    let opts = TrainOptions::from_config(&config.classifier);
    let report = train_supervised(&gold, &history.t0_val, &mut clf, &opts, derive_seed(seed, "train"))?;
    Ok((clf, report))
}

/// Continues training `clf` on gold ∪ `pseudo`. An empty pseudo set leaves
/// the classifier untouched and returns `None`.
pub fn retrain_with_pseudo(
    clf: &mut Classifier,
    history: &TimeSlices,
    pseudo: &[LabeledPair],
    strategy: &Strategy,
    config: &AdaptConfig,
    seed: u64,
) -> Result<Option<TrainReport>> {
    if pseudo.is_empty() {
        return Ok(None);
    }
    let set = TrainingSet::from_gold(&history.t0_train)?.with_pseudo(pseudo.to_vec());
    let opts = TrainOptions {
        mu_loss: strategy.effective_mu_loss(),
        vae_trainable: strategy.kind == StrategyKind::JPv && !strategy.freeze_vae,
        ..TrainOptions::from_config(&config.classifier)
    };
    train_supervised(&set, &history.t0_val, clf, &opts, derive_seed(seed, "retrain")).map(Some)
}

pub fn adapt(
    history: &TimeSlices,
    trans: &Corpus,
    strategy: &Strategy,
    config: &AdaptConfig,
    seed: u64,
) -> Result<AdaptOutcome> {
    strategy.validate()?;
    config.validate()?;
    let kind = strategy.kind;
    let (vae, vae_trace) = if kind.uses_vae() {
        let (v, t) = fit_vae(&history.t0_train, trans, config, seed)?;
        (Some(v), t)
    } else {
        (None, Vec::new())
    };
    let (mut classifier, initial) = initial_classifier(history, trans, kind, vae, config, seed)?;
    let mut pseudo = Vec::new();
    let mut retrain = None;
    if kind.uses_pseudo_labels() {
        pseudo = pseudo_label(&trans.unlabeled(), &classifier, config.pseudo.threshold, config.pseudo.weight)?;
        retrain = retrain_with_pseudo(&mut classifier, history, &pseudo, strategy, config, seed)?;
    }
    Ok(AdaptOutcome {
        classifier,
        pseudo,
        initial,
        retrain,
        vae_trace,
    })
}

const CLASSIFIER_FILE: &str = "classifier.ckpt";
const VOCAB_FILE: &str = "vocab.tsv";
const VAE_FILE: &str = "vae.ckpt";
const VAE_VOCAB_FILE: &str = "vae_vocab.tsv";
const META_FILE: &str = "bundle.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMeta {
    pub strategy: Strategy,
    pub num_classes: usize,
    pub topics: usize,
    pub label_names: Option<Vec<String>>,
    pub config: AdaptConfig,
    pub has_vae: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub classifier: Classifier,
    pub meta: BundleMeta,
}

impl ModelBundle {
    pub fn new(classifier: Classifier, strategy: Strategy, config: AdaptConfig, label_names: Option<Vec<String>>) -> Self {
        let meta = BundleMeta {
            strategy,
            num_classes: classifier.num_classes,
            topics: classifier.topics,
            label_names,
            config,
            has_vae: classifier.vae.is_some(),
        };
        ModelBundle { classifier, meta }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.classifier.params.save(&dir.join(CLASSIFIER_FILE))?;
        self.classifier.vocab.save(&dir.join(VOCAB_FILE))?;
        if let Some(v) = &self.classifier.vae {
            v.model.save(&dir.join(VAE_FILE))?;
            v.vocab.save(&dir.join(VAE_VOCAB_FILE))?;
        }
        let mut json = serde_json::to_vec_pretty(&self.meta)?;
        json.push(b'\n');
        crate::io::write_atomic(&dir.join(META_FILE), &json)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let meta: BundleMeta = serde_json::from_str(&crate::io::read_to_string(&meta_path)?)?;
        let params = ParameterStore::load(&dir.join(CLASSIFIER_FILE))?;
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let mut classifier = Classifier {
            config: meta.config.classifier.clone(),
            num_classes: meta.num_classes,
            topics: meta.topics,
            vocab,
            params,
            vae: None,
        };
        if meta.has_vae {
            let model = VaeModel::load(&dir.join(VAE_FILE))?;
            let vocab = Vocabulary::load(&dir.join(VAE_VOCAB_FILE))?;
            classifier.attach_vae(AttachedVae { model, vocab })?;
        }
        Ok(ModelBundle { classifier, meta })
    }
}
