use std::collections::BTreeSet;

use driftbench_core::corpus::{vocabulary_overlap, Corpus, Post, Vocabulary};
use driftbench_core::diffcore::{
    finite_difference_check, softmax_rows, Adam, ParameterStore, SparseRow, Tape, Tensor, Var,
};
use driftbench_core::encoder::{self, encode, EncoderConfig, EncoderKind};
use driftbench_core::harness::{ExperimentConfig, MetricCell, MetricsReport, RunMeta};
use driftbench_core::rng::stream;
use driftbench_core::Result;
use proptest::prelude::*;
use rand::Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Reduces a node to a scalar through fixed random weights so every output
/// entry carries gradient.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let w = Tensor::randn(&shape, 1.0, &mut stream(seed, "weights"));
    let w = tape.constant(w);
    let y = tape.mul(x, w)?;
    Ok(tape.sum(y))
}

fn store(entries: &[(&str, Vec<usize>)], seed: u64) -> ParameterStore {
    let mut rng = stream(seed, "params");
    let mut s = ParameterStore::new();
    for (name, shape) in entries {
        s.insert(*name, Tensor::randn(shape, 1.0, &mut rng)).unwrap();
    }
    s
}

fn random_rows(n: usize, cols: usize, seed: u64) -> Vec<SparseRow> {
    let mut rng = stream(seed, "rows");
    (0..n)
        .map(|_| {
            let mut row = SparseRow::new();
            for j in 0..cols {
                if rng.random_bool(0.4) {
                    row.push((j, f64::from(rng.random_range(1..4u8))));
                }
            }
            if row.is_empty() {
                row.push((0, 1.0));
            }
            row
        })
        .collect()
}

/// Relative error of the tape against finite differences, or `None` when some
/// gradient entry is too small for a relative comparison to mean anything.
fn fd(s: &ParameterStore, f: impl Fn(&mut Tape, &ParameterStore) -> Result<Var>) -> Option<f64> {
    let mut t = Tape::new();
    let loss = f(&mut t, s).unwrap();
    let grads = t.backward(loss).unwrap();
    let tiny = s
        .names()
        .any(|n| grads.param(n).is_none_or(|g| g.data().iter().any(|v| *v != 0.0 && v.abs() < 1e-6)));
    if tiny {
        return None;
    }
    Some(finite_difference_check(s, STEP, f).unwrap())
}

/// Returns the loss and the ReLU pre-activation.
fn dense_graph(t: &mut Tape, s: &ParameterStore, seed: u64) -> Result<(Var, Var)> {
    let a = t.param(s, "a")?;
    let b = t.param(s, "b")?;
    let w = t.param(s, "w")?;
    let bias = t.param(s, "bias")?;
    let m = t.param(s, "m")?;
    let sum = t.add(a, b)?;
    let prod = t.mul(sum, b)?;
    let scaled = t.scale(prod, 0.7);
    let aff = t.affine(scaled, w, bias)?;
    let act = t.relu(aff);
    let mm = t.matmul(a, m)?;
    let tr = t.transpose(mm)?;
    let back = t.transpose(tr)?;
    let joined = t.concat(act, back)?;
    let mean = t.mean_rows(joined)?;
    let stacked = t.stack_rows(&[mean, mean])?;
    // exp sits on a leaf: deep inside the graph its inputs grow large
    // enough for cancelling terms to defeat a per-entry relative check.
    let e = t.exp(a);
    let x = weighted_sum(t, stacked, seed)?;
    let y = weighted_sum(t, e, seed ^ 1)?;
    Ok((t.add(x, y)?, aff))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn dense_ops_match_finite_differences(seed in any::<u64>(), r in 1usize..5, c in 1usize..5, k in 1usize..5) {
        let s = store(&[("a", vec![r, c]), ("b", vec![r, c]), ("w", vec![k, c]), ("bias", vec![k]), ("m", vec![c, k])], seed);
        // Finite differences are meaningless across the ReLU kink.
        let mut t = Tape::new();
        let (_, pre) = dense_graph(&mut t, &s, seed).unwrap();
        prop_assume!(t.value(pre).data().iter().all(|v| v.abs() > 1e-3));
        let err = fd(&s, |t, s| dense_graph(t, s, seed).map(|(loss, _)| loss));
        prop_assume!(err.is_some());
        let err = err.unwrap();
        prop_assert!(err < TOL, "rel err {}", err);
    }

    #[test]
    fn normalizing_ops_match_finite_differences(seed in any::<u64>(), r in 1usize..5, c in 2usize..6) {
        let s = store(&[("x", vec![r, c]), ("mu", vec![r, c]), ("ls", vec![r, c])], seed);
        let targets: Vec<usize> = (0..r).map(|i| (i * 7 + seed as usize) % c).collect();
        let weights: Vec<f64> = (0..r).map(|i| 0.5 + i as f64).collect();
        let rows = random_rows(r, c, seed);
        let noise = Tensor::randn(&[r, c], 1.0, &mut stream(seed, "noise"));
        let err = fd(&s, |t, s| {
            let x = t.param(s, "x")?;
            let mu = t.param(s, "mu")?;
            let ls = t.param(s, "ls")?;
            let p = t.softmax(x);
            let bce = t.binary_cross_entropy(p, targets.clone(), weights.clone())?;
            let lp = t.log_softmax(x);
            let nll = t.sparse_nll(lp, rows.clone())?;
            let kl = t.kl_standard_normal(mu, ls)?;
            let z = t.gaussian_sample(mu, ls, &noise)?;
            let zs = weighted_sum(t, z, seed)?;
            let a = t.add(bce, nll)?;
            let b = t.add(a, kl)?;
            t.add(b, zs)
        });
        prop_assume!(err.is_some());
        let err = err.unwrap();
        prop_assert!(err < TOL, "rel err {}", err);
    }

    #[test]
    fn lookup_ops_match_finite_differences(seed in any::<u64>(), v in 2usize..8, d in 1usize..5, n in 1usize..5) {
        let s = store(&[("table", vec![v, d]), ("w", vec![v, d]), ("b", vec![v])], seed);
        let mut rng = stream(seed, "idx");
        let bags: Vec<Vec<usize>> = (0..n)
            .map(|_| (0..rng.random_range(1..5)).map(|_| rng.random_range(0..v)).collect())
            .collect();
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..v)).collect();
        let rows = random_rows(n, d, seed);
        let err = fd(&s, |t, s| {
            let table = t.param(s, "table")?;
            let w = t.param(s, "w")?;
            let b = t.param(s, "b")?;
            let bag = t.embedding_bag(table, bags.clone())?;
            let g = t.gather(table, idx.clone())?;
            let sa = t.sparse_affine(rows.clone(), w, b)?;
            let x = weighted_sum(t, bag, seed)?;
            let y = weighted_sum(t, g, seed ^ 1)?;
            let z = weighted_sum(t, sa, seed ^ 2)?;
            let xy = t.add(x, y)?;
            t.add(xy, z)
        });
        prop_assume!(err.is_some());
        let err = err.unwrap();
        prop_assert!(err < TOL, "rel err {}", err);
    }

    #[test]
    fn softmax_on_simplex_and_shift_invariant(
        raw in prop::collection::vec(-100_000i32..100_000, 1..30),
        shift in -1000i32..1000,
    ) {
        // Multiples of 1/1024 keep the shifted inputs exactly representable.
        let x: Vec<f64> = raw.iter().map(|&v| f64::from(v) / 1024.0).collect();
        let shifted: Vec<f64> = x.iter().map(|v| v + f64::from(shift)).collect();
        let a = softmax_rows(&Tensor::vector(x));
        let b = softmax_rows(&Tensor::vector(shifted));
        prop_assert!((a.sum() - 1.0).abs() <= 1e-12);
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn adam_ignores_zero_gradients(seed in any::<u64>(), n in 1usize..20) {
        let mut s = store(&[("p", vec![n])], seed);
        let before = s.clone();
        let mut t = Tape::new();
        let p = t.param(&s, "p")?;
        let z = t.scale(p, 0.0);
        let loss = t.sum(z);
        let grads = t.backward(loss)?;
        s.accumulate(&grads);
        Adam::new(1e-3).step(&mut s);
        prop_assert_eq!(s.get("p").unwrap(), before.get("p").unwrap());
    }

    #[test]
    fn bag_encoder_is_order_invariant(seed in any::<u64>(), len in 1usize..12) {
        let words: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        let vocab = Vocabulary::from_tokens(words.clone());
        let cfg = EncoderConfig { kind: EncoderKind::BagOfEmbeddings, embed_dim: 6, max_len: 64 };
        let mut rng = stream(seed, "bag");
        let mut params = ParameterStore::new();
        encoder::init_params(&mut params, &cfg, vocab.len(), &mut rng).unwrap();
        let tokens: Vec<String> = (0..len).map(|_| words[rng.random_range(0..11) % 10].clone()).collect();
        let mut reversed = tokens.clone();
        reversed.reverse();
        let post = |t: Vec<String>| Post { id: "x".into(), timestamp: 0, tokens: t, label: None };
        let a = encode(&post(tokens), &vocab, &params, &cfg).unwrap();
        let b = encode(&post(reversed), &vocab, &params, &cfg).unwrap();
        prop_assert_eq!(a.b, b.b);
    }

    #[test]
    fn overlap_is_symmetric_and_bounded(seed in any::<u64>(), k in 1usize..40) {
        let mut rng = stream(seed, "overlap");
        let mut corpus = |tag: &str| {
            let posts = (0..rng.random_range(1..8))
                .map(|i| Post {
                    id: format!("{tag}{i}"),
                    timestamp: i,
                    tokens: (0..rng.random_range(1..6)).map(|_| format!("t{}", rng.random_range(0..25))).collect(),
                    label: None,
                })
                .collect();
            Corpus::new(posts, 2, None).unwrap()
        };
        let a = corpus("a");
        let b = corpus("b");
        let none = BTreeSet::new();
        let ab = vocabulary_overlap(&a, &b, k, &none).unwrap();
        let ba = vocabulary_overlap(&b, &a, k, &none).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=100.0).contains(&ab));
        prop_assert_eq!(vocabulary_overlap(&a, &a, k, &none).unwrap(), 100.0);
    }

    #[test]
    fn report_csv_roundtrips(accs in prop::collection::vec(0.0f64..=1.0, 1..10)) {
        let cells: Vec<MetricCell> = accs
            .iter()
            .enumerate()
            .map(|(i, &a)| MetricCell {
                strategy: ["BASE", "PL"][i % 2].into(),
                seed: i as u64,
                slice: "t4".into(),
                accuracy: a,
                n_test: 100 + i,
                config_hash: "h".into(),
            })
            .collect();
        let meta = RunMeta { config_hash: "h".into(), version: "v".into(), data_start: 0, data_end: 9 };
        let r = MetricsReport::new(cells, meta.clone()).unwrap();
        let back = MetricsReport::new(MetricsReport::cells_from_csv(&r.to_csv().unwrap()).unwrap(), meta).unwrap();
        prop_assert_eq!(back, r);
    }

    #[test]
    fn config_hash_tracks_fields(seed in 0u64..1000, epochs in 1usize..100) {
        let base = ExperimentConfig::default();
        let mut other = base.clone();
        other.seeds = vec![seed];
        prop_assert_eq!(base.hash() == other.hash(), base.seeds == other.seeds);
        let mut e = base.clone();
        e.adapt.classifier.epochs = epochs;
        prop_assert_eq!(base.hash() == e.hash(), base.adapt.classifier.epochs == epochs);
        let mut out = base.clone();
        out.output_dir = format!("elsewhere{seed}").into();
        prop_assert_eq!(base.hash(), out.hash());
    }
}

