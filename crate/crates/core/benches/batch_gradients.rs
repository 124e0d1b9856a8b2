use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fspool::data::{self, PolygonConfig};
use fspool::exec::Execution;
use fspool::models::{DecoderKind, ForwardOptions, ModelConfig, PoolKind, SetModel};
use fspool::sortops::SortMode;
use fspool::train::{batch_gradients, reconstruction_loss, LossKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn executions() -> Vec<(&'static str, Execution)> {
    let mut v = vec![("sequential", Execution::Sequential)];
    #[cfg(feature = "parallel")]
    v.push(("parallel", Execution::Parallel));
    v
}

fn polygon_autoencoder(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_gradients");
    for n in [16, 64] {
        let model = SetModel::init(
            ModelConfig::polygon(DecoderKind::Equivariant, PoolKind::Fspool, n),
            0,
        )
        .unwrap();
        let pc = PolygonConfig {
            n_points: n,
            batch: 16,
            seed: 0,
        };
        let (input, _) = data::gen_polygon_batch(&pc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let opts = ForwardOptions {
            sort: SortMode::Relaxed,
            tau: 1.0,
            zero_latent: false,
        };
        for (name, exec) in executions() {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| {
                    batch_gradients(
                        exec,
                        &model.params,
                        input.len(),
                        |_| true,
                        |i, g, p| {
                            let x = input.x[i].clone();
                            reconstruction_loss(&model, g, p, x.clone(), x, LossKind::Direct, &opts)
                        },
                    )
                    .unwrap()
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, polygon_autoencoder);
criterion_main!(benches);
