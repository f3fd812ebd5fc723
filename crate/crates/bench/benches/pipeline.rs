use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use icre::autograd::Tape;
use icre::dataset::{generate_synthetic, Modality, SyntheticConfig};
use icre::harness::{TrainConfig, Trainer};
use icre::metrics::{cmc_map, pairwise_distances, Metric};
use icre::model::Model;
use icre::nn::Mode;

fn batch_modalities(n: usize) -> Vec<Modality> {
    (0..n)
        .map(|i| {
            if i % 2 == 0 {
                Modality::Vis
            } else {
                Modality::Ir
            }
        })
        .collect()
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    let x = ArrayD::<f32>::from_elem(IxDyn(&[20, 3, 64, 32]), 0.25);
    let mods = batch_modalities(20);
    for (name, mpfr_on) in [("baseline", false), ("full", true)] {
        let cfg = TrainConfig {
            mpfr_on,
            sdce_on: mpfr_on,
            ..TrainConfig::default()
        };
        let model = Model::<f32>::new(&cfg.model_config(10), 0).unwrap();
        group.bench_function(name, |b| {
            b.iter(|| {
                let tape = Tape::inference();
                model
                    .forward(&tape.constant(x.clone()), &mods, Mode::Eval)
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic(
        &SyntheticConfig {
            num_ids: 10,
            per_id: 4,
            height: 64,
            width: 32,
            seed: 0,
        },
        dir.path(),
    )
    .unwrap();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for (name, mpfr_on) in [("baseline", false), ("full", true)] {
        let cfg = TrainConfig {
            p: 5,
            k: 4,
            mpfr_on,
            sdce_on: mpfr_on,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(&cfg, &manifest).unwrap();
        group.bench_function(name, |b| b.iter(|| trainer.train_step(0.01).unwrap()));
    }
    group.finish();
}

fn retrieval(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (q, g, d) = (400, 400, 256);
    let qf = Array2::from_shape_fn((q, d), |_| rng.random::<f64>() - 0.5);
    let gf = Array2::from_shape_fn((g, d), |_| rng.random::<f64>() - 0.5);
    let q_ids: Vec<u64> = (0..q as u64).map(|i| i % 40).collect();
    let g_ids: Vec<u64> = (0..g as u64).map(|i| i % 40).collect();
    c.bench_function("pairwise_cosine_400x400x256", |b| {
        b.iter(|| pairwise_distances(qf.view(), gf.view(), Metric::CosineDistance).unwrap())
    });
    let dist = pairwise_distances(qf.view(), gf.view(), Metric::CosineDistance).unwrap();
    c.bench_function("cmc_map_400x400", |b| {
        b.iter(|| cmc_map(&dist, &q_ids, &g_ids, None, false).unwrap())
    });
}

criterion_group!(benches, forward, train_step, retrieval);
criterion_main!(benches);
