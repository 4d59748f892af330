use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use contextalign::autograd::Graph;
use contextalign::eval::zero_shot_scores;
use contextalign::training::config::RunConfig;
use contextalign::training::{co_supervision_loss, MaskSettings};
use contextalign::{Image, TokenSequence};
use contextalign_bench::{fixture, toy_config};

fn step(c: &mut Criterion, name: &str, cfg: RunConfig, batch: usize) {
    let (model, data) = fixture(&cfg, batch);
    let images: Vec<&Image> = data.iter().map(|e| &e.set.images[e.set.golden]).collect();
    let texts: Vec<TokenSequence> = data.iter().map(|e| e.set.query.clone()).collect();
    let texts: Vec<&TokenSequence> = texts.iter().collect();
    let masking = Some(MaskSettings {
        ratio: cfg.mask_ratio,
        reduction: cfg.attention_reduction,
    });
    c.bench_function(&format!("co_supervised_step/{name}/batch{batch}"), |b| {
        b.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut g = Graph::full(model.params());
            let (losses, _) =
                co_supervision_loss(&mut g, &model, &images, &texts, cfg.mining, masking, None, &mut rng).unwrap();
            black_box(g.backward(losses.total))
        })
    });
}

fn bench_steps(c: &mut Criterion) {
    step(c, "toy", toy_config(), 4);
    step(c, "desk", RunConfig::default(), 10);
}

fn bench_eval(c: &mut Criterion) {
    let (model, data) = fixture(&RunConfig::default(), 1);
    c.bench_function("zero_shot_set/desk", |b| b.iter(|| black_box(zero_shot_scores(&model, &data[0].set).unwrap())));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_steps, bench_eval
}
criterion_main!(benches);
