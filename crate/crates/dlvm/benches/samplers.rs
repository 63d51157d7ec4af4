//! Per-step cost of the two imputation chains. The Metropolis-within-Gibbs
//! step should cost at most a handful of density evaluations more than the
//! pseudo-Gibbs step; everything heavy (encoder and decoder passes) is shared.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dlvm::data::{bars_prototypes, synth_bernoulli_mixture, BernMixParams};
use dlvm::imputation::{make_mask, run_chain, MaskScenario, SamplerKind};
use dlvm::model::{ModelDims, OutputKind};
use dlvm::rng::RngStream;
use dlvm::training::{init_decoder, init_encoder};

fn bench_chain_steps(c: &mut Criterion) {
    let protos = bars_prototypes(8, 8, 0.1);
    let params = BernMixParams {
        weights: vec![0.25; 4],
        prototypes: protos,
    };
    let data = synth_bernoulli_mixture(&params, 64, 7).unwrap();
    let dims = ModelDims {
        latent: 6,
        hidden: 32,
        data: 64,
    };
    let mut rng = RngStream::seed(1);
    let decoder = init_decoder(dims, OutputKind::Bernoulli, 0.0, &mut rng).unwrap();
    let encoder = init_encoder(dims, &mut rng).unwrap();
    let mask = make_mask(64, MaskScenario::Mar { fraction: 0.5 }, &mut rng).unwrap();
    let x = data.row(0).to_vec();

    let mut group = c.benchmark_group("chain_step");
    let t_total = 512;
    group.throughput(criterion::Throughput::Elements(t_total));
    for sampler in [SamplerKind::PseudoGibbs, SamplerKind::MetropolisWithinGibbs] {
        group.bench_with_input(
            BenchmarkId::new("sampler", sampler.to_string()),
            &sampler,
            |b, &sampler| {
                b.iter(|| {
                    let mut chain_rng = RngStream::seed(3);
                    run_chain(
                        &decoder,
                        &encoder,
                        &x,
                        &mask,
                        sampler,
                        t_total,
                        0,
                        &mut chain_rng,
                        false,
                    )
                    .unwrap()
                })
            },
        );
    }
    group.finish();
}

criterion_group!(benches, bench_chain_steps);
criterion_main!(benches);
