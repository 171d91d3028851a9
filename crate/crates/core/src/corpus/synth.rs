//! Synthetic drifting corpus with a known token→label oracle.
//!
//! Each class owns one or more latent topics; each topic owns a fixed number
//! of word *slots*. A post of class `c` draws a topic of `c`, then several
//! words from that topic's slots, optionally one confuser word from another
//! class, and a handful of background words and stopwords.
//!
//! Drift acts on slots: slot `j` of topic `t` emits its generation-`g` alias
//! where `g = ⌊drift_rate · drift_span · τ + u_tj⌋`, `τ ∈ [0, 1)` is the
//! post's position in time and `u_tj` a staggered per-slot offset. Aliases
//! keep their slot's label, so later posts carry label evidence that an
//! early-trained model has never seen but that unlabeled later data exposes.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use super::{Corpus, Post};
use crate::error::{Error, Result};

const STOPWORD_FILLERS: &[&str] = &["the", "a", "to", "and", "of", "is", "in", "it", "for", "on"];
const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "br",
    "ch", "dr", "gl", "kr", "pl", "sh", "st", "th", "tr",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou", "ea"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftConfig {
    pub num_classes: usize,
    pub num_posts: usize,
    /// Size of the label-neutral background vocabulary.
    pub vocab_size: usize,
    pub num_topics: usize,
    /// In `[0, 1]`; 0 disables drift.
    pub drift_rate: f64,
    pub words_per_topic: usize,
    pub topic_words_per_post: usize,
    /// Chance of one extra word from another class' topic.
    pub confuser_prob: f64,
    /// Inclusive range of background words per post.
    pub background_words: [usize; 2],
    /// Chance that a background word is a common stopword.
    pub stopword_prob: f64,
    /// Alias generations per slot over the whole timeline at drift rate 1.
    pub drift_span: f64,
    pub start_timestamp: i64,
    pub mean_gap_secs: u64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            num_classes: 3,
            num_posts: 3400,
            vocab_size: 400,
            num_topics: 6,
            drift_rate: 0.5,
            words_per_topic: 20,
            topic_words_per_post: 5,
            confuser_prob: 0.3,
            background_words: [5, 10],
            stopword_prob: 0.25,
            drift_span: 2.0,
            start_timestamp: 1_577_836_800,
            mean_gap_secs: 600,
        }
    }
}

impl DriftConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.drift_rate) {
            return fail(format!("drift rate {} outside [0, 1]", self.drift_rate));
        }
        if self.num_classes == 0 || self.num_posts == 0 {
            return fail("num_classes and num_posts must be positive".into());
        }
        if self.num_topics < self.num_classes {
            return fail(format!(
                "num_topics ({}) must be at least num_classes ({})",
                self.num_topics, self.num_classes
            ));
        }
        if self.words_per_topic == 0 || self.topic_words_per_post == 0 {
            return fail("words_per_topic and topic_words_per_post must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.confuser_prob) || !(0.0..=1.0).contains(&self.stopword_prob) {
            return fail("probabilities must lie in [0, 1]".into());
        }
        if self.confuser_prob > 0.0 && self.topic_words_per_post < 2 {
            return fail("confusers need at least 2 topic words per post".into());
        }
        if self.background_words[0] > self.background_words[1] {
            return fail("background_words range is inverted".into());
        }
        if self.background_words[1] > 0 && self.vocab_size == 0 && self.stopword_prob < 1.0 {
            return fail("background words requested with an empty background vocabulary".into());
        }
        if self.drift_span < 0.0 {
            return fail("drift_span must be non-negative".into());
        }
        Ok(())
    }
}

/// Ground truth recorded by the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenOracle {
    /// Every label-bearing token (all alias generations) → its class.
    pub token_label: BTreeMap<String, usize>,
    /// Per topic: every token it ever emits.
    pub topic_words: Vec<BTreeSet<String>>,
    /// Owning class of each topic.
    pub topic_class: Vec<usize>,
    pub num_classes: usize,
}

impl TokenOracle {
    /// Majority vote of label-bearing tokens; ties go to the lowest class.
    pub fn label_of(&self, tokens: &[String]) -> Option<usize> {
        let mut votes = vec![0usize; self.num_classes];
        for t in tokens {
            if let Some(&c) = self.token_label.get(t) {
                votes[c] += 1;
            }
        }
        let best = *votes.iter().max()?;
        if best == 0 {
            return None;
        }
        votes.iter().position(|&v| v == best)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub oracle: TokenOracle,
}

struct WordMint {
    used: HashSet<String>,
    stop: BTreeSet<String>,
}

impl WordMint {
    fn new() -> Self {
        let used = STOPWORD_FILLERS.iter().map(|s| s.to_string()).collect();
        WordMint {
            used,
            stop: super::english_stopwords(),
        }
    }

    fn fresh<R: Rng>(&mut self, rng: &mut R) -> String {
        loop {
            let syllables = rng.random_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS.choose(rng).unwrap());
                w.push_str(VOWELS.choose(rng).unwrap());
            }
            if rng.random_bool(0.3) {
                w.push_str(["n", "s", "r", "l", "x"].choose(rng).unwrap());
            }
            if self.stop.contains(&w) {
                continue;
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

pub fn synth_drift_generate(seed: u64, config: &DriftConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = crate::rng::stream(seed, "synth");
    let mut mint = WordMint::new();
    let c = config.num_classes;
    let rate = config.drift_rate * config.drift_span;
    let max_gen = rate.floor() as usize + 1;

    // offsets[t][j] in [0, 1), one slot per stratum so switches are evenly staggered
    let mut offsets = Vec::with_capacity(config.num_topics);
    let mut aliases: Vec<Vec<Vec<String>>> = Vec::with_capacity(config.num_topics);
    for _ in 0..config.num_topics {
        let mut strata: Vec<usize> = (0..config.words_per_topic).collect();
        strata.shuffle(&mut rng);
        let u: Vec<f64> = strata
            .iter()
            .map(|&s| (s as f64 + rng.random::<f64>()) / config.words_per_topic as f64)
            .collect();
        offsets.push(u);
        let slots = (0..config.words_per_topic)
            .map(|_| (0..=max_gen).map(|_| mint.fresh(&mut rng)).collect())
            .collect();
        aliases.push(slots);
    }
    let background: Vec<String> = (0..config.vocab_size).map(|_| mint.fresh(&mut rng)).collect();

    let topic_class: Vec<usize> = (0..config.num_topics).map(|t| t % c).collect();
    let topics_of: Vec<Vec<usize>> = (0..c)
        .map(|k| (0..config.num_topics).filter(|t| t % c == k).collect())
        .collect();

    let mut token_label = BTreeMap::new();
    let mut topic_words = Vec::with_capacity(config.num_topics);
    for (t, slots) in aliases.iter().enumerate() {
        let mut words = BTreeSet::new();
        for w in slots.iter().flatten() {
            token_label.insert(w.clone(), topic_class[t]);
            words.insert(w.clone());
        }
        topic_words.push(words);
    }

    let zipf = if config.vocab_size > 0 {
        Some(Zipf::new(config.vocab_size as f64, 1.0).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let word_at = |t: usize, j: usize, tau: f64| -> &String {
        let g = (rate * tau + offsets[t][j]).floor() as usize;
        &aliases[t][j][g.min(max_gen)]
    };

    let mut posts = Vec::with_capacity(config.num_posts);
    let mut timestamp = config.start_timestamp;
    for i in 0..config.num_posts {
        let tau = i as f64 / config.num_posts as f64;
        let label = rng.random_range(0..c);
        let topic = *topics_of[label].choose(&mut rng).unwrap();
        let mut tokens: Vec<String> = (0..config.topic_words_per_post)
            .map(|_| word_at(topic, rng.random_range(0..config.words_per_topic), tau).clone())
            .collect();
        if c > 1 && rng.random_bool(config.confuser_prob) {
            let other = (label + rng.random_range(1..c)) % c;
            let t = *topics_of[other].choose(&mut rng).unwrap();
            tokens.push(word_at(t, rng.random_range(0..config.words_per_topic), tau).clone());
        }
        let n_bg = rng.random_range(config.background_words[0]..=config.background_words[1]);
        for _ in 0..n_bg {
            let stop = zipf.is_none() || rng.random_bool(config.stopword_prob);
            if stop {
                tokens.push(STOPWORD_FILLERS.choose(&mut rng).unwrap().to_string());
            } else {
                let k = zipf.as_ref().unwrap().sample(&mut rng) as usize;
                tokens.push(background[k.clamp(1, config.vocab_size) - 1].clone());
            }
        }
        tokens.shuffle(&mut rng);
        posts.push(Post {
            id: format!("p{i:06}"),
            timestamp,
            tokens,
            label: Some(label),
        });
        let gap = config.mean_gap_secs.max(1);
        timestamp += rng.random_range(1..=2 * gap) as i64;
    }

    Ok(SyntheticCorpus {
        corpus: Corpus::new(posts, c, None)?,
        oracle: TokenOracle {
            token_label,
            topic_words,
            topic_class,
            num_classes: c,
        },
    })
}
