use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::config::{slice_index, ExperimentConfig, Regime};
use super::report::{MetricCell, MetricsReport, RunMeta};
use crate::adapt::{adapt, initial_classifier, retrain_with_pseudo, Strategy, StrategyKind};
use crate::classify::{pseudo_label, Classifier, LabeledPair};
use crate::corpus::{
    chronological_split, load_corpus, sort_chronologically, synth_drift_generate, Corpus, TimeSlices,
    TokenOracle, SLICE_NAMES,
};
use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "DRIFTBENCH_THREADS";

/// A split corpus ready for training, plus the generator oracle when synthetic.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub slices: TimeSlices,
    pub oracle: Option<TokenOracle>,
}

impl PreparedData {
    pub fn time_range(&self) -> (i64, i64) {
        let mut lo = i64::MAX;
        let mut hi = i64::MIN;
        for (_, part) in self.slices.partitions() {
            for p in &part.posts {
                lo = lo.min(p.timestamp);
                hi = hi.max(p.timestamp);
            }
        }
        (lo, hi)
    }

    /// Unlabeled trans-data for timeline column `col` under `regime`.
    pub fn trans_for(&self, col: usize, regime: Regime) -> Result<Corpus> {
        let s = &self.slices;
        match (col, regime) {
            (0, Regime::Inductive) => Ok(s.t0_train.unlabeled()),
            (i, Regime::Inductive) => Ok(s.slices[i - 1].unlabeled()),
            (i, Regime::Transductive) if i >= 2 => {
                let parts: Vec<&Corpus> = s.slices[..i - 1].iter().collect();
                Ok(Corpus::concat(&parts)?.unlabeled())
            }
            (i, Regime::Transductive) => Err(Error::Config(format!(
                "{} has no earlier slices for a transductive regime",
                SLICE_NAMES[i]
            ))),
        }
    }

    /// `t1 ∪ t2 ∪ t3`, the trans-data for testing on t4.
    pub fn t4_trans(&self) -> Result<Corpus> {
        self.trans_for(4, Regime::Transductive)
    }
}

/// Loads or generates the corpus for `run_seed` and splits it.
pub fn prepare(config: &ExperimentConfig, run_seed: u64) -> Result<PreparedData> {
    let (corpus, oracle) = match (&config.corpus.path, &config.corpus.synthetic) {
        (Some(path), None) => (load_corpus(path, &config.corpus.schema)?, None),
        (None, Some(drift)) => {
            let s = synth_drift_generate(config.corpus.synthetic_seed.unwrap_or(run_seed), drift)?;
            (s.corpus, Some(s.oracle))
        }
        _ => return Err(Error::Config("configure exactly one of corpus.path and corpus.synthetic".into())),
    };
    Ok(PreparedData {
        slices: chronological_split(&corpus, &config.split)?,
        oracle,
    })
}

/// Prepares every seed's data up front, sharing it when the corpus is fixed.
pub fn prepare_all(config: &ExperimentConfig) -> Result<BTreeMap<u64, Arc<PreparedData>>> {
    config.validate()?;
    let fixed = config.corpus.path.is_some() || config.corpus.synthetic_seed.is_some();
    let mut out = BTreeMap::new();
    let mut shared: Option<Arc<PreparedData>> = None;
    for &seed in &config.seeds {
        let data = match (&shared, fixed) {
            (Some(d), true) => d.clone(),
            _ => {
                let d = Arc::new(prepare(config, seed)?);
                if fixed {
                    shared = Some(d.clone());
                }
                d
            }
        };
        out.insert(seed, data);
    }
    Ok(out)
}

/// Pool sized by `DRIFTBENCH_THREADS`, defaulting to the available cores.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(e.to_string()))
}

fn meta(config: &ExperimentConfig, data: &BTreeMap<u64, Arc<PreparedData>>) -> RunMeta {
    let (lo, hi) = data.values().map(|d| d.time_range()).fold((i64::MAX, i64::MIN), |a, b| {
        (a.0.min(b.0), a.1.max(b.1))
    });
    RunMeta {
        config_hash: config.hash(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        data_start: lo,
        data_end: hi,
    }
}

fn cell(config_hash: &str, strategy: &str, seed: u64, slice: &str, clf: &Classifier, test: &Corpus) -> Result<MetricCell> {
    Ok(MetricCell {
        strategy: strategy.to_string(),
        seed,
        slice: slice.to_string(),
        accuracy: clf.accuracy(test)?,
        n_test: test.len(),
        config_hash: config_hash.to_string(),
    })
}

struct Job<'a> {
    seed: u64,
    data: &'a PreparedData,
    strategy: Strategy,
    /// Columns evaluated with this job's model.
    columns: Vec<usize>,
    /// Column whose regime defines the trans-data (ignored for BASE).
    trans_column: Option<usize>,
}

/// Table 2: every configured strategy and seed, evaluated on every
/// configured slice with trans-data chosen per column regime.
pub fn run_timeline_eval(config: &ExperimentConfig) -> Result<MetricsReport> {
    let data = prepare_all(config)?;
    let columns: Vec<usize> = config.slices.iter().map(|s| slice_index(s)).collect::<Result<_>>()?;
    let hash = config.hash();
    let mut jobs = Vec::new();
    for (&seed, d) in &data {
        for &kind in &config.strategies {
            let strategy = config.strategy_for(kind);
            if kind.uses_trans() {
                for &c in &columns {
                    jobs.push(Job {
                        seed,
                        data: d,
                        strategy: strategy.clone(),
                        columns: vec![c],
                        trans_column: Some(c),
                    });
                }
            } else {
                jobs.push(Job {
                    seed,
                    data: d,
                    strategy,
                    columns: columns.clone(),
                    trans_column: None,
                });
            }
        }
    }
    let pool = thread_pool()?;
    let results: Vec<Vec<MetricCell>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let trans = match job.trans_column {
                    Some(c) => job.data.trans_for(c, config.regimes[c])?,
                    None => job.data.slices.t0_train.empty_like(),
                };
                let out = adapt(&job.data.slices, &trans, &job.strategy, &config.adapt, job.seed)?;
                log::info!("{} seed {} columns {:?} done", job.strategy.kind, job.seed, job.columns);
                job.columns
                    .iter()
                    .map(|&c| {
                        cell(
                            &hash,
                            job.strategy.kind.name(),
                            job.seed,
                            SLICE_NAMES[c],
                            &out.classifier,
                            job.data.slices.test_slice(c),
                        )
                    })
                    .collect()
            })
            .collect::<Result<_>>()
    })?;
    MetricsReport::new(results.into_iter().flatten().collect(), meta(config, &data))
}

/// Seeded shuffle of `trans`, truncated to `round(fraction · n)` posts.
pub fn truncate_trans(trans: &Corpus, fraction: f64, seed: u64) -> Corpus {
    let mut posts = trans.posts.clone();
    posts.shuffle(&mut crate::rng::stream(seed, "scale"));
    posts.truncate((fraction * trans.len() as f64).round() as usize);
    sort_chronologically(&mut posts);
    trans.with_posts(posts)
}

fn fraction_label(kind: StrategyKind, f: f64) -> String {
    format!("{kind}[frac={f:.4}]")
}

/// Fig. 4: t4 accuracy of each ablation method over trans-data fractions.
pub fn ablate_scale(config: &ExperimentConfig, fractions: &[f64]) -> Result<MetricsReport> {
    for &f in fractions {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("fraction {f} outside [0, 1]")));
        }
    }
    let data = prepare_all(config)?;
    let hash = config.hash();
    let mut jobs: Vec<(u64, &PreparedData, Option<(StrategyKind, f64)>)> = Vec::new();
    for (&seed, d) in &data {
        jobs.push((seed, d, None));
        for &m in &config.ablation.methods {
            for &f in fractions {
                jobs.push((seed, d, Some((m, f))));
            }
        }
    }
    let pool = thread_pool()?;
    let results: Vec<MetricCell> = pool.install(|| {
        jobs.par_iter()
            .map(|&(seed, d, job)| {
                let (label, kind, trans) = match job {
                    None => ("BASE".to_string(), StrategyKind::Base, d.slices.t0_train.empty_like()),
                    Some((m, f)) => (fraction_label(m, f), m, truncate_trans(&d.t4_trans()?, f, seed)),
                };
                let out = adapt(&d.slices, &trans, &config.strategy_for(kind), &config.adapt, seed)?;
                cell(&hash, &label, seed, "t4", &out.classifier, d.slices.test_slice(4))
            })
            .collect::<Result<_>>()
    })?;
    MetricsReport::new(results, meta(config, &data))
}

pub const LABEL_CONDITIONS: [&str; 4] = ["only_negative", "none", "all", "only_positive"];

/// Pseudo pairs split by agreement with the generator oracle.
pub fn grade_pseudo(pseudo: &[LabeledPair], oracle: &TokenOracle) -> (Vec<LabeledPair>, Vec<LabeledPair>) {
    pseudo
        .iter()
        .cloned()
        .partition(|p| oracle.label_of(&p.post.tokens) == Some(p.label))
}

/// PL where the trans-data is exactly the posts of `pseudo`, labeled as given.
/// An empty set reduces to BASE.
pub fn pl_with_pseudo(
    slices: &TimeSlices,
    pseudo: &[LabeledPair],
    config: &ExperimentConfig,
    seed: u64,
) -> Result<Classifier> {
    let trans = slices
        .t0_train
        .with_posts(pseudo.iter().map(|p| p.post.clone()).collect());
    let (mut clf, _) = initial_classifier(slices, &trans, StrategyKind::Pl, None, &config.adapt, seed)?;
    retrain_with_pseudo(&mut clf, slices, pseudo, &Strategy::new(StrategyKind::Pl), &config.adapt, seed)?;
    Ok(clf)
}

/// Fig. 5: PL retrained on only-negative, no, all and only-positive pseudo pairs.
pub fn ablate_label_quality(config: &ExperimentConfig) -> Result<MetricsReport> {
    let data = prepare_all(config)?;
    if data.values().any(|d| d.oracle.is_none()) {
        return Err(Error::Unsupported(
            "label-quality ablation needs a synthetic corpus with an oracle".into(),
        ));
    }
    let hash = config.hash();
    let pool = thread_pool()?;
    // Pseudo-label once per seed, then fan out over conditions.
    let graded: Vec<(u64, &PreparedData, Vec<LabeledPair>, Vec<LabeledPair>)> = pool.install(|| {
        data.par_iter()
            .map(|(&seed, d)| {
                let trans = d.t4_trans()?;
                let (clf, _) = initial_classifier(&d.slices, &trans, StrategyKind::Pl, None, &config.adapt, seed)?;
                let pseudo = pseudo_label(&trans, &clf, config.adapt.pseudo.threshold, config.adapt.pseudo.weight)?;
                let (pos, neg) = grade_pseudo(&pseudo, d.oracle.as_ref().expect("checked"));
                log::info!("seed {seed}: {} correct and {} incorrect pseudo labels", pos.len(), neg.len());
                Ok((seed, &**d, pos, neg))
            })
            .collect::<Result<_>>()
    })?;
    let mut jobs = Vec::new();
    for (seed, d, pos, neg) in &graded {
        for cond in LABEL_CONDITIONS {
            let subset: Vec<LabeledPair> = match cond {
                "only_negative" => neg.clone(),
                "none" => Vec::new(),
                "only_positive" => pos.clone(),
                _ => {
                    let mut all: Vec<LabeledPair> = pos.iter().chain(neg).cloned().collect();
                    all.sort_by(|a, b| (a.post.timestamp, &a.post.id).cmp(&(b.post.timestamp, &b.post.id)));
                    all
                }
            };
            jobs.push((*seed, *d, cond, subset));
        }
    }
    let results: Vec<MetricCell> = pool.install(|| {
        jobs.par_iter()
            .map(|(seed, d, cond, subset)| {
                let clf = pl_with_pseudo(&d.slices, subset, config, *seed)?;
                cell(&hash, &format!("PL[labels={cond}]"), *seed, "t4", &clf, d.slices.test_slice(4))
            })
            .collect::<Result<_>>()
    })?;
    MetricsReport::new(results, meta(config, &data))
}

/// Freshness study: each method with exactly one of t1, t2, t3 as trans-data,
/// tested on t4, beside the no-trans BASE bar.
pub fn ablate_freshness(config: &ExperimentConfig) -> Result<MetricsReport> {
    let data = prepare_all(config)?;
    let hash = config.hash();
    let mut jobs: Vec<(u64, &PreparedData, Option<(StrategyKind, usize)>)> = Vec::new();
    for (&seed, d) in &data {
        jobs.push((seed, d, None));
        for &m in &config.ablation.methods {
            for src in 1..=3 {
                jobs.push((seed, d, Some((m, src))));
            }
        }
    }
    let pool = thread_pool()?;
    let results: Vec<MetricCell> = pool.install(|| {
        jobs.par_iter()
            .map(|&(seed, d, job)| {
                let (label, kind, trans) = match job {
                    None => ("BASE".to_string(), StrategyKind::Base, d.slices.t0_train.empty_like()),
                    Some((m, src)) => (
                        format!("{m}[trans={}]", SLICE_NAMES[src]),
                        m,
                        d.slices.slices[src - 1].unlabeled(),
                    ),
                };
                let out = adapt(&d.slices, &trans, &config.strategy_for(kind), &config.adapt, seed)?;
                cell(&hash, &label, seed, "t4", &out.classifier, d.slices.test_slice(4))
            })
            .collect::<Result<_>>()
    })?;
    MetricsReport::new(results, meta(config, &data))
}
