use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skelvad::config::RunConfig;
use skelvad::metrics::{auc_scores, eer_scores};
use skelvad::model::train_ctd;
use skelvad::tokenizer::tokenize;
use skelvad::{Branch, PoseWindow, TokenSequence, UetdWeights};

fn window(rng: &mut ChaCha8Rng, beta: usize, k: usize) -> PoseWindow {
    let abs = (0..beta * k * 2).map(|_| rng.gen_range(0.0..1.0)).collect();
    PoseWindow::from_absolute("bench", 0, 0, beta, k, abs).unwrap()
}

fn sequences(cfg: &RunConfig, n: usize) -> Vec<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|_| tokenize(&window(&mut rng, cfg.beta, cfg.keypoints), cfg.tokenization()).unwrap())
        .collect()
}

fn benches(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = window(&mut rng, cfg.beta, cfg.keypoints);
    c.bench_function("tokenize st-prp", |b| b.iter(|| tokenize(black_box(&w), cfg.tokenization()).unwrap()));

    let weights = UetdWeights::init(cfg.model_config(), cfg.seed).unwrap();
    let seq = tokenize(&w, cfg.tokenization()).unwrap();
    c.bench_function("forward ctd", |b| b.iter(|| weights.generate(black_box(&seq), Branch::Ctd).unwrap()));

    let batch = sequences(&cfg, cfg.ctd.batch_size);
    let mut train = cfg.train_config(Branch::Ctd);
    train.epochs = 1;
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("ctd step", |b| b.iter(|| train_ctd(black_box(&batch), cfg.model_config(), &train).unwrap()));
    group.finish();

    let scores: Vec<f64> = (0..10_000).map(|_| rng.gen_range(0.0..1.0)).collect();
    let labels: Vec<u8> = (0..10_000).map(|i| u8::from(i % 10 == 0)).collect();
    c.bench_function("auc 10k", |b| b.iter(|| auc_scores(black_box(&scores), &labels).unwrap()));
    c.bench_function("eer 10k", |b| b.iter(|| eer_scores(black_box(&scores), &labels).unwrap()));
}

criterion_group!(pipeline, benches);
criterion_main!(pipeline);
