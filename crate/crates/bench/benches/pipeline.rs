use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use socialgcn_bench::{cohort, model_input, ring_of_cliques};
use socialgcn_core::autodiff::{AdamConfig, Mode, Tape};
use socialgcn_core::centrality::CentralityTable;
use socialgcn_core::features::preprocess;
use socialgcn_core::graphcore::{gedd, normalize_adjacency};
use socialgcn_core::models::{Model, ModelKind, ModelSpec};

fn graphs(c: &mut Criterion) {
    let g = ring_of_cliques(20, 10);
    c.bench_function("normalize_adjacency/200", |b| b.iter(|| normalize_adjacency(&g.adjacency).unwrap()));
    c.bench_function("gedd/200/w10", |b| b.iter(|| gedd(&g, 10).unwrap()));
    let small = ring_of_cliques(10, 6);
    c.bench_function("centrality/60", |b| b.iter(|| CentralityTable::compute(&small).unwrap()));
}

fn features(c: &mut Criterion) {
    let d = cohort(30, 90, 1);
    c.bench_function("preprocess/30x90", |b| b.iter(|| preprocess(&d.panel, 5, 3.0).unwrap()));
}

fn training(c: &mut Criterion) {
    let g = ring_of_cliques(4, 10);
    for kind in ModelKind::ALL {
        let mut spec = ModelSpec::new(kind, 10, 5, 10);
        spec.lstm_hidden = 16;
        spec.gcn_layers = vec![16];
        spec.dense_widths = vec![16];
        let input = model_input(&spec, &g, 12);
        let targets: Vec<f64> = (0..120).map(|i| (i % 7) as f64 / 3.0 - 1.0).collect();
        let mask = vec![true; 120];
        c.bench_function(&format!("train_step/{kind}/120"), |b| {
            b.iter_batched(
                || (Model::init(spec.clone(), 3).unwrap(), ChaCha8Rng::seed_from_u64(5)),
                |(mut model, mut rng)| {
                    let mut tape = Tape::new();
                    let out = model.forward(&mut tape, &input, Mode::Train, &mut rng).unwrap();
                    let loss = tape.mse_loss(out, &targets, &mask).unwrap();
                    tape.backward(loss).unwrap();
                    model.params.adam_step(&tape.param_grads(), &AdamConfig::default()).unwrap();
                },
                BatchSize::SmallInput,
            )
        });
    }
}

criterion_group!(benches, graphs, features, training);
criterion_main!(benches);
