use std::collections::BTreeSet;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use driftbench_core::classify::{
    classification_loss, Classifier, ClassifierConfig, TrainingSet,
};
use driftbench_core::corpus::{
    build_vocabulary, english_stopwords, synth_drift_generate, tokenize, vectorize_bow, BowVector, Corpus,
    DriftConfig,
};
use driftbench_core::diffcore::Tape;
use driftbench_core::encoder::{EncoderConfig, EncoderKind};
use driftbench_core::vae::{train_vae, VaeConfig, VaeModel};

fn corpus(posts: usize) -> Corpus {
    let cfg = DriftConfig {
        num_posts: posts,
        ..DriftConfig::default()
    };
    synth_drift_generate(0, &cfg).unwrap().corpus
}

fn bench_tokenize(c: &mut Criterion) {
    let text = "RT @someone: Masks work!!! See https://example.org/x #COVID19 #stayhome \
                we're all in this together, aren't we? 2020-03-14"
        .repeat(8);
    c.bench_function("tokenize_1k_chars", |b| b.iter(|| tokenize(std::hint::black_box(&text))));
}

fn bench_classifier(c: &mut Criterion) {
    let data = corpus(400);
    let vocab = build_vocabulary(&[&data], 2, 20_000, &BTreeSet::new()).unwrap();
    let pairs = TrainingSet::from_gold(&data).unwrap().pairs[..32].to_vec();
    for kind in [EncoderKind::BagOfEmbeddings, EncoderKind::TinyAttention] {
        let cfg = ClassifierConfig {
            encoder: EncoderConfig {
                kind,
                ..EncoderConfig::default()
            },
            ..ClassifierConfig::default()
        };
        let clf = Classifier::new(cfg, vocab.clone(), data.num_classes, 0, 0).unwrap();
        c.bench_function(&format!("classifier_loss_batch32_{kind:?}"), |b| {
            b.iter(|| classification_loss(&pairs, &clf).unwrap())
        });
        c.bench_function(&format!("classifier_backward_batch32_{kind:?}"), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let loss = driftbench_core::classify::joint_loss_node(&mut tape, &clf, &pairs, 0.0, None, false)
                    .unwrap();
                tape.backward(loss).unwrap()
            })
        });
    }
}

fn bench_vae_epoch(c: &mut Criterion) {
    let data = corpus(400);
    let vocab = build_vocabulary(&[&data], 2, 20_000, &english_stopwords()).unwrap();
    let bows: Vec<BowVector> = data.posts.iter().map(|p| vectorize_bow(p, &vocab)).collect();
    let cfg = VaeConfig {
        topics: 6,
        epochs: 1,
        ..VaeConfig::default()
    };
    let model = VaeModel::new(vocab.len(), &cfg, 0).unwrap();
    c.bench_function("vae_epoch_400_posts", |b| {
        b.iter_batched(
            || model.clone(),
            |mut m| train_vae(&bows, &mut m, &cfg, 0).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_tokenize, bench_classifier, bench_vae_epoch
}
criterion_main!(benches);
