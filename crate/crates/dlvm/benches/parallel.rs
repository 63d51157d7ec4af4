//! Parallel-vs-sequential throughput of the data-parallel cores: Monte Carlo
//! likelihood sweeps, EM restarts, and imputation chain batches. Each
//! workload runs inside rayon pools of different sizes; the 1-thread pool is
//! the sequential baseline (the same code also compiles without rayon via
//! `--no-default-features`, producing identical numbers).

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dlvm::blowup::{make_blowup_params, mc_loglik, BlowupSpec};
use dlvm::data::{bars_prototypes, synth_bernoulli_mixture, synth_gauss_mixture, BernMixParams, GaussMixParams};
use dlvm::imputation::{impute_dataset, MaskScenario, SamplerKind};
use dlvm::mixture::{em_fit, EmConfig};
use dlvm::model::{ModelDims, OutputKind};
use dlvm::rng::RngStream;
use dlvm::training::{init_decoder, init_encoder};

fn pool_sizes() -> Vec<usize> {
    let max = std::thread::available_parallelism().map_or(4, |n| n.get());
    if max <= 1 {
        vec![1]
    } else {
        vec![1, max]
    }
}

fn with_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("pool")
        .install(f)
}

fn bench_mc_loglik(c: &mut Criterion) {
    let truth = GaussMixParams {
        weights: vec![1.0],
        means: vec![vec![0.0; 5]],
        vars: vec![vec![1.0; 5]],
    };
    let data = synth_gauss_mixture(&truth, 50, 3).unwrap();
    let spec = BlowupSpec::new(0, vec![1.0, 0.0], vec![0.0, 10.0], 9);
    let theta = make_blowup_params(&data, &spec, 1).unwrap();
    let rng = RngStream::seed(5);

    let mut group = c.benchmark_group("mc_loglik_s20000");
    for threads in pool_sizes() {
        group.bench_with_input(BenchmarkId::new("threads", threads), &threads, |b, &t| {
            b.iter(|| with_pool(t, || mc_loglik(&theta, &data, 20_000, &rng).unwrap()))
        });
    }
    group.finish();
}

fn bench_em_restarts(c: &mut Criterion) {
    let truth = GaussMixParams {
        weights: vec![0.5, 0.5],
        means: vec![vec![2.0; 4], vec![-2.0; 4]],
        vars: vec![vec![0.5; 4], vec![0.5; 4]],
    };
    let data = synth_gauss_mixture(&truth, 300, 11).unwrap();
    let mut config = EmConfig::new(8, OutputKind::Gaussian, 0.0625);
    config.restarts = 8;
    let rng = RngStream::seed(2);

    let mut group = c.benchmark_group("em_fit_8_restarts");
    group.sample_size(20);
    for threads in pool_sizes() {
        group.bench_with_input(BenchmarkId::new("threads", threads), &threads, |b, &t| {
            b.iter(|| with_pool(t, || em_fit(&data, &config, &rng).unwrap()))
        });
    }
    group.finish();
}

fn bench_chain_batch(c: &mut Criterion) {
    let params = BernMixParams {
        weights: vec![0.25; 4],
        prototypes: bars_prototypes(8, 8, 0.1),
    };
    let data = synth_bernoulli_mixture(&params, 32, 7).unwrap();
    let dims = ModelDims {
        latent: 6,
        hidden: 32,
        data: 64,
    };
    let mut rng = RngStream::seed(1);
    let decoder = init_decoder(dims, OutputKind::Bernoulli, 0.0, &mut rng).unwrap();
    let encoder = init_encoder(dims, &mut rng).unwrap();
    let items: Vec<usize> = (0..32).collect();
    let root = RngStream::seed(13);

    let mut group = c.benchmark_group("impute_32_chains_t256");
    group.sample_size(20);
    for threads in pool_sizes() {
        group.bench_with_input(BenchmarkId::new("threads", threads), &threads, |b, &t| {
            b.iter(|| {
                with_pool(t, || {
                    impute_dataset(
                        &decoder,
                        &encoder,
                        &data,
                        &items,
                        MaskScenario::Mar { fraction: 0.5 },
                        SamplerKind::MetropolisWithinGibbs,
                        256,
                        20,
                        &root,
                    )
                    .unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_mc_loglik, bench_em_restarts, bench_chain_batch);
criterion_main!(benches);
