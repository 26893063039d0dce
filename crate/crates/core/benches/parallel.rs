//! Rayon pool against a one-thread pool on the data-parallel hot paths.
//! For the loop-only build, run `cargo bench --no-default-features`; the
//! "pool" rows then measure the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use biasfix::bft::{state_loss, TrainState};
use biasfix::fixtures::toy_fixture;
use biasfix::nn::forward;
use biasfix::quant::{forward_quant, prepare_and_quantize, QuantConfig};
use biasfix::theory::{rounding_error_sum_stats, MonteCarloConfig};

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    vec![
        ("sequential", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("pool", rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()),
    ]
}

fn bench(c: &mut Criterion) {
    let fx = toy_fixture(0).unwrap();
    let p = prepare_and_quantize(&fx.graph, &fx.calib, QuantConfig { bits_w: 6, bits_a: 8 }).unwrap();
    let (teacher, _) = forward(&p.folded, &fx.tune, false).unwrap();
    let state = TrainState::new(&p.qmodel);
    let theory = MonteCarloConfig {
        k_values: vec![9, 128],
        trials: 2000,
        ..MonteCarloConfig::default()
    };

    let mut g = c.benchmark_group("parallel");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::new("forward_quant_256", name), |b| {
            b.iter(|| pool.install(|| forward_quant(&p.qmodel, &fx.heldout, true).unwrap()))
        });
        g.bench_function(BenchmarkId::new("tuning_loss_512", name), |b| {
            b.iter(|| pool.install(|| state_loss(&p.qmodel, &state, &fx.tune, &teacher).unwrap()))
        });
        g.bench_function(BenchmarkId::new("error_sum_2000", name), |b| {
            b.iter(|| pool.install(|| rounding_error_sum_stats(&theory).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
