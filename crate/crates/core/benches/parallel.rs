//! Default rayon pool against a single-worker pool on the three data-parallel
//! hot paths. Build with `--no-default-features` to time the sequential
//! fallback itself; both arms then run the same code.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPool;

use versegen::corpus::{parse_poem_records, split_into_couplets, Couplet};
use versegen::decoding::{generate_batch, DecodeConfig};
use versegen::eval::self_bleu;
use versegen::model::{init_model, loss_and_grads, random_batch, ModelConfig, Pass};
use versegen::tokenizer::train_bpe;

fn pools() -> Vec<(&'static str, ThreadPool)> {
    let default = rayon::ThreadPoolBuilder::new().build().unwrap();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    vec![("rayon", default), ("single", single)]
}

fn bench_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        ffn_hidden: 256,
        vocab_size,
        context_len: 64,
        dropout: 0.1,
        tie_embeddings: false,
    }
}

fn couplets() -> Vec<Couplet> {
    let report = parse_poem_records(include_str!("../../../data/sample_poems.jsonl"));
    report.poems.iter().flat_map(|p| split_into_couplets(p, "\t").couplets).collect()
}

fn gradients(c: &mut Criterion) {
    let cfg = bench_config(256);
    let params = init_model(&cfg, 0).unwrap();
    let batch = random_batch(&cfg, 32, 48, 1).unwrap();
    let mut group = c.benchmark_group("loss_and_grads");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| loss_and_grads(&params, &batch, 0.1, Pass::Train { seed: 2 }).unwrap()))
        });
    }
    group.finish();
}

fn generation(c: &mut Criterion) {
    let tok = train_bpe(&couplets(), 128).unwrap();
    let params = init_model(&bench_config(tok.vocab_size()), 0).unwrap();
    let cfg = DecodeConfig { max_tokens: 32, ..DecodeConfig::default() };
    let mut group = c.benchmark_group("generate_batch");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| generate_batch(&params, &tok, &cfg, 32).unwrap()))
        });
    }
    group.finish();
}

fn diversity(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let texts: Vec<Vec<u32>> = (0..400).map(|_| (0..40).map(|_| rng.random_range(0..200)).collect()).collect();
    let mut group = c.benchmark_group("self_bleu");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| pool.install(|| self_bleu(&texts, 4).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, gradients, generation, diversity);
criterion_main!(benches);
