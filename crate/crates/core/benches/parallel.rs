//! Sequential vs rayon execution for the two data-parallel hot paths.

use criterion::{criterion_group, criterion_main, Criterion};
use insertion_parser::corpus::{build_vocab, generate_synthetic, GrammarSpec};
use insertion_parser::decode_eval::{evaluate, DecodeConfig};
use insertion_parser::exec::Execution;
use insertion_parser::model::{Model, ModelConfig};
use insertion_parser::oracle::Weighting;
use insertion_parser::training::{batch_gradients, make_batch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model_and_data() -> (Model<f32>, Vec<insertion_parser::corpus::Example>) {
    let data = generate_synthetic(&GrammarSpec::default(), 64, 1).unwrap();
    let cfg = ModelConfig { d_enc: 64, d_dec: 64, enc_layers: 2, dec_layers: 3, dropout: 0.0, ..Default::default() };
    (Model::new(cfg, build_vocab(&data)).unwrap(), data)
}

fn bench_gradients(c: &mut Criterion) {
    let (model, data) = model_and_data();
    let idx: Vec<usize> = (0..32).collect();
    let items = make_batch(&data, &idx, model.vocab(), Weighting::default(), false, &mut ChaCha8Rng::seed_from_u64(3));
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_function(format!("{exec:?}"), |b| b.iter(|| batch_gradients(&model, &data, &items, None, 0, 8, exec).unwrap()));
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let (model, data) = model_and_data();
    let cfg = DecodeConfig::default();
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_function(format!("{exec:?}"), |b| b.iter(|| evaluate(&model, &data[..16], &cfg, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_gradients, bench_evaluate);
criterion_main!(benches);
