//! Compares the data-parallel and sequential code paths on the two
//! hot loops: batch gradient computation and per-item evaluation
//! scoring. Build with `--features parallel` (the default) so both
//! entry points are available in one binary.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use bookcast::eval::{id_map, stage1_records};
use bookcast::model::{init_model, loss_and_grad, ModelCheckpoint, ModelConfig, ModelInput};
use bookcast::oracle::{make_corpus, proxy_per, CorpusSpec, WorldConfig};
use bookcast::sequence::DatasetRecord;
use bookcast::util::{par_map, seq_map};

fn fixtures() -> (ModelCheckpoint, Vec<DatasetRecord>) {
    let world = WorldConfig::with_seed(11);
    let corpus = make_corpus(&CorpusSpec::new(2, 16, 3), &world).unwrap();
    let records = stage1_records(&corpus).unwrap();
    let ckpt = init_model(&ModelConfig {
        vocab_size: id_map(&world).vocab_size(),
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        max_len: 64,
        speaker_dim: world.embed_dim,
        seed: 11,
    })
    .unwrap();
    (ckpt, records)
}

fn bench_batch_gradients(c: &mut Criterion) {
    let (ckpt, records) = fixtures();
    let batch: Vec<ModelInput> = records
        .iter()
        .take(16)
        .map(ModelInput::from_record)
        .collect();
    let n_params = ckpt.params.len();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    let work = |input: &ModelInput| {
        let mut grad = vec![0.0f64; n_params];
        loss_and_grad(&ckpt, input, &mut grad).unwrap()
    };
    group.bench_function(BenchmarkId::new("map", "parallel"), |b| {
        b.iter(|| par_map(&batch, work))
    });
    group.bench_function(BenchmarkId::new("map", "sequential"), |b| {
        b.iter(|| seq_map(&batch, work))
    });
    group.finish();
}

fn bench_per_scoring(c: &mut Criterion) {
    let world = WorldConfig::with_seed(11);
    let corpus = make_corpus(&CorpusSpec::new(4, 64, 3), &world).unwrap();
    let utts: Vec<_> = corpus.utterances().cloned().collect();
    let mut group = c.benchmark_group("per_scoring");
    let work = |u: &bookcast::corpus::Utterance| {
        proxy_per(&u.speech, &u.text, u.speaker_id, &u.attributes, false, &world)
    };
    group.bench_function(BenchmarkId::new("map", "parallel"), |b| {
        b.iter(|| par_map(&utts, work))
    });
    group.bench_function(BenchmarkId::new("map", "sequential"), |b| {
        b.iter(|| seq_map(&utts, work))
    });
    group.finish();
}

criterion_group!(benches, bench_batch_gradients, bench_per_scoring);
criterion_main!(benches);
