use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Corpus, Post};
use crate::error::{Error, Result};

pub const SLICE_NAMES: [&str; 5] = ["t0", "t1", "t2", "t3", "t4"];

/// Where the earliest (training) segment ends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitCut {
    /// Earliest fraction of posts.
    Fraction(f64),
    /// Every post strictly before this timestamp.
    Timestamp(i64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub t0_fraction: Option<f64>,
    pub cut_timestamp: Option<i64>,
    /// Train/validation/test ratios inside the earliest segment.
    pub static_ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            t0_fraction: Some(0.4),
            cut_timestamp: None,
            static_ratios: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn cut(&self) -> Result<SplitCut> {
        match (self.t0_fraction, self.cut_timestamp) {
            (_, Some(ts)) => Ok(SplitCut::Timestamp(ts)),
            (Some(f), None) => Ok(SplitCut::Fraction(f)),
            (None, None) => Err(Error::Config(
                "split needs t0_fraction or cut_timestamp".into(),
            )),
        }
    }
}

/// The earliest segment split into train/val/test, plus four later slices.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSlices {
    pub t0_train: Corpus,
    pub t0_val: Corpus,
    pub t0_test: Corpus,
    /// `t1..t4` in chronological order.
    pub slices: Vec<Corpus>,
}

impl TimeSlices {
    /// Test set for column `i` of the timeline (0 = static t0 test).
    pub fn test_slice(&self, i: usize) -> &Corpus {
        if i == 0 {
            &self.t0_test
        } else {
            &self.slices[i - 1]
        }
    }

    /// Every post of `t0` (train, val and test), chronologically sorted.
    pub fn t0_all(&self) -> Corpus {
        let mut posts: Vec<Post> = self
            .t0_train
            .posts
            .iter()
            .chain(&self.t0_val.posts)
            .chain(&self.t0_test.posts)
            .cloned()
            .collect();
        sort_chronologically(&mut posts);
        self.t0_train.with_posts(posts)
    }

    pub fn partitions(&self) -> Vec<(&'static str, &Corpus)> {
        let mut out = vec![
            ("t0_train", &self.t0_train),
            ("t0_val", &self.t0_val),
            ("t0_test", &self.t0_test),
        ];
        for (i, s) in self.slices.iter().enumerate() {
            out.push((SLICE_NAMES[i + 1], s));
        }
        out
    }
}

/// Timestamp order, ties broken by id.
pub fn sort_chronologically(posts: &mut [Post]) {
    posts.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.id.cmp(&b.id)));
}

pub fn chronological_split(corpus: &Corpus, spec: &SplitSpec) -> Result<TimeSlices> {
    if corpus.len() < 10 {
        return Err(Error::InvalidInput(format!(
            "split needs at least 10 posts, got {}",
            corpus.len()
        )));
    }
    let [r_train, r_val, r_test] = spec.static_ratios;
    if [r_train, r_val, r_test].iter().any(|r| !(0.0..=1.0).contains(r))
        || (r_train + r_val + r_test - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "static ratios {:?} must be in [0,1] and sum to 1",
            spec.static_ratios
        )));
    }
    let mut posts = corpus.posts.clone();
    sort_chronologically(&mut posts);

    let n0 = match spec.cut()? {
        SplitCut::Fraction(f) => {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("t0_fraction {f} outside [0,1]")));
            }
            ((f * posts.len() as f64) + 1e-9).floor() as usize
        }
        SplitCut::Timestamp(ts) => posts.partition_point(|p| p.timestamp < ts),
    };
    if n0 == 0 {
        return Err(Error::EmptyPartition {
            partition: "t0".into(),
        });
    }
    let rest = posts.split_off(n0);
    let t0 = posts;

    let n_val = (r_val * n0 as f64).round() as usize;
    let n_test = (r_test * n0 as f64).round() as usize;
    let mut order: Vec<usize> = (0..n0).collect();
    order.shuffle(&mut crate::rng::stream(spec.seed, "split"));
    let pick = |range: std::ops::Range<usize>| -> Vec<Post> {
        let mut idx: Vec<usize> = order[range].to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| t0[i].clone()).collect()
    };
    let val = pick(0..n_val.min(n0));
    let test = pick(n_val.min(n0)..(n_val + n_test).min(n0));
    let train = pick((n_val + n_test).min(n0)..n0);

    let mut slices = Vec::with_capacity(4);
    let (base, extra) = (rest.len() / 4, rest.len() % 4);
    let mut start = 0;
    for i in 0..4 {
        let len = base + usize::from(i < extra);
        slices.push(corpus.with_posts(rest[start..start + len].to_vec()));
        start += len;
    }

    let out = TimeSlices {
        t0_train: corpus.with_posts(train),
        t0_val: corpus.with_posts(val),
        t0_test: corpus.with_posts(test),
        slices,
    };
    for (name, part) in out.partitions() {
        if part.is_empty() {
            return Err(Error::EmptyPartition {
                partition: name.to_string(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(n: usize) -> Corpus {
        // Deliberately shuffled input order.
        let posts = (0..n)
            .rev()
            .map(|i| Post {
                id: format!("p{i:03}"),
                timestamp: 100 + i as i64,
                tokens: vec!["w".into()],
                label: Some(i % 2),
            })
            .collect();
        Corpus::new(posts, 2, None).unwrap()
    }

    fn spec(f: f64) -> SplitSpec {
        SplitSpec {
            t0_fraction: Some(f),
            ..SplitSpec::default()
        }
    }

    #[test]
    fn forty_percent_of_twenty() {
        let s = chronological_split(&corpus(20), &spec(0.4)).unwrap();
        let t0 = s.t0_all();
        assert_eq!(t0.len(), 8);
        assert!(t0.posts.iter().all(|p| p.timestamp < 108));
        assert_eq!(s.slices.iter().map(Corpus::len).collect::<Vec<_>>(), [3, 3, 3, 3]);
        assert_eq!((s.t0_train.len(), s.t0_val.len(), s.t0_test.len()), (6, 1, 1));
    }

    #[test]
    fn sixty_percent_of_twenty() {
        let s = chronological_split(&corpus(20), &spec(0.6)).unwrap();
        assert_eq!(s.t0_all().len(), 12);
        assert!(s.slices.iter().all(|c| c.len() == 2));
    }

    #[test]
    fn cut_before_all_posts_is_empty_t0() {
        let sp = SplitSpec {
            t0_fraction: None,
            cut_timestamp: Some(5),
            ..SplitSpec::default()
        };
        match chronological_split(&corpus(20), &sp) {
            Err(Error::EmptyPartition { partition }) => assert_eq!(partition, "t0"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn absolute_cut() {
        let sp = SplitSpec {
            t0_fraction: None,
            cut_timestamp: Some(110),
            ..SplitSpec::default()
        };
        let s = chronological_split(&corpus(30), &sp).unwrap();
        assert_eq!(s.t0_all().len(), 10);
        assert_eq!(s.slices.iter().map(Corpus::len).sum::<usize>(), 20);
    }

    #[test]
    fn uneven_remainder_differs_by_at_most_one() {
        let s = chronological_split(&corpus(23), &spec(0.4)).unwrap();
        let sizes: Vec<usize> = s.slices.iter().map(Corpus::len).collect();
        assert_eq!(sizes, [4, 4, 3, 3]);
    }

    #[test]
    fn too_small_and_bad_ratios() {
        assert!(chronological_split(&corpus(9), &spec(0.4)).is_err());
        let sp = SplitSpec {
            static_ratios: [0.5, 0.1, 0.1],
            ..SplitSpec::default()
        };
        assert!(matches!(chronological_split(&corpus(20), &sp), Err(Error::Config(_))));
    }
}
