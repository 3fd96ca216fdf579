use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hydra_core::data::{features, gen_synth, Split, SynthConfig};
use hydra_core::model::{ForwardOptions, Model, ModelConfig, ModelKind};
use hydra_core::objective::total_loss;
use hydra_core::par::set_parallel;
use hydra_core::{Tape, Tensor};

#[derive(Clone, Copy)]
enum Mode {
    Sequential,
    /// rayon on the global pool (skipped internally when it has one thread).
    Parallel,
    /// rayon on a dedicated four-thread pool, whatever the core count.
    Pool4,
}

const MODES: [(&str, Mode); 3] = [
    ("sequential", Mode::Sequential),
    ("parallel", Mode::Parallel),
    ("rayon_4_threads", Mode::Pool4),
];

struct Runner {
    pool: rayon::ThreadPool,
}

impl Runner {
    fn new() -> Self {
        Self {
            pool: rayon::ThreadPoolBuilder::new()
                .num_threads(4)
                .build()
                .unwrap(),
        }
    }

    fn run<R: Send>(&self, mode: Mode, f: impl FnOnce() -> R + Send) -> R {
        set_parallel(!matches!(mode, Mode::Sequential));
        match mode {
            Mode::Pool4 => self.pool.install(f),
            _ => f(),
        }
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn matmul(c: &mut Criterion) {
    let a = random(&[256, 4096], 1);
    let b = random(&[4096, 128], 2);
    let mut group = c.benchmark_group("matmul_fwd_bwd_256x4096x128");
    let runner = Runner::new();
    for (name, mode) in MODES {
        group.bench_function(name, |bench| {
            bench.iter(|| {
                runner.run(mode, || {
                    let mut tape = Tape::new();
                    let av = tape.param(a.clone()).unwrap();
                    let bv = tape.param(b.clone()).unwrap();
                    let y = tape.matmul(av, bv).unwrap();
                    let s = tape.sum(y, None).unwrap();
                    black_box(tape.backward(s).unwrap());
                })
            })
        });
    }
    group.finish();
    set_parallel(true);
}

fn conv(c: &mut Criterion) {
    let x = random(&[32, 128, 64], 3);
    let w = random(&[128, 64, 3], 4);
    let bias = random(&[128], 5);
    let mut group = c.benchmark_group("conv1d_pool_fwd_bwd_b32_l128_64to128");
    let runner = Runner::new();
    for (name, mode) in MODES {
        group.bench_function(name, |bench| {
            bench.iter(|| {
                runner.run(mode, || {
                    let mut tape = Tape::new();
                    let xv = tape.param(x.clone()).unwrap();
                    let wv = tape.param(w.clone()).unwrap();
                    let bv = tape.param(bias.clone()).unwrap();
                    let h = tape.conv1d(xv, wv, bv).unwrap();
                    let h = tape.maxpool1d(h).unwrap();
                    let s = tape.sum(h, None).unwrap();
                    black_box(tape.backward(s).unwrap());
                })
            })
        });
    }
    group.finish();
    set_parallel(true);
}

fn train_step(c: &mut Criterion) {
    let ds = gen_synth(&SynthConfig {
        n_train: 64,
        n_val: 8,
        n_test: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let train = ds.split(Split::Train);
    let x = features(&train[..32]).unwrap();
    let y: Vec<Tensor> = (0..3).map(|t| random(&[32, 1], 10 + t)).collect();
    let mut group = c.benchmark_group("train_step_b32_d128");
    group.sample_size(10);
    let runner = Runner::new();
    for kind in ModelKind::ALL {
        let model = Model::new(ModelConfig::new(kind, 128), 0).unwrap();
        for (name, mode) in MODES {
            group.bench_function(BenchmarkId::new(kind.as_str(), name), |bench| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                bench.iter(|| {
                    runner.run(mode, || {
                        let mut tape = Tape::new();
                        let xv = tape.constant(x.clone()).unwrap();
                        let out = model
                            .forward(&mut tape, xv, &mut ForwardOptions::train(&mut rng))
                            .unwrap();
                        let targets: Vec<_> = y
                            .iter()
                            .map(|t| tape.constant(t.clone()).unwrap())
                            .collect();
                        let loss =
                            total_loss(&mut tape, &out.preds, &targets, &out.latents, 0.1).unwrap();
                        black_box(tape.backward(loss.total).unwrap());
                    })
                })
            });
        }
    }
    group.finish();
    set_parallel(true);
}

fn predict(c: &mut Criterion) {
    let model = Model::new(ModelConfig::new(ModelKind::Hydra, 128), 0).unwrap();
    let x = random(&[1024, 128], 20);
    let mut group = c.benchmark_group("predict_hydra_1024");
    group.sample_size(10);
    let runner = Runner::new();
    for (name, mode) in MODES {
        group.bench_function(name, |bench| {
            bench.iter(|| runner.run(mode, || black_box(model.predict(&x).unwrap())))
        });
    }
    group.finish();
    set_parallel(true);
}

criterion_group!(benches, matmul, conv, train_step, predict);
criterion_main!(benches);
