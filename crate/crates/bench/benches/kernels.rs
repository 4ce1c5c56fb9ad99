use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use hyperlab_bench::{gaussian, rng, sweep_points};
use hyperlab_core::linalg::newton_schulz_orthogonalize;
use hyperlab_core::model::{build_params, random_batch, ModelGraph};
use hyperlab_core::reference_data;
use hyperlab_core::scalefit::{fit_power_law, fit_quadratic_loglr, sensitivity};
use hyperlab_core::{Mat, ModelConfig};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32, 128, 256] {
        let a = gaussian(n, n, 1);
        let b = gaussian(n, n, 2);
        group.bench_with_input(BenchmarkId::new("ab", n), &n, |bench, _| bench.iter(|| a.matmul(black_box(&b))));
        group.bench_with_input(BenchmarkId::new("abt", n), &n, |bench, _| bench.iter(|| a.matmul_t(black_box(&b))));
    }
    group.finish();
}

fn newton_schulz(c: &mut Criterion) {
    let mut group = c.benchmark_group("newton_schulz");
    for (r, k) in [(64, 64), (128, 512), (256, 256)] {
        let g = gaussian(r, k, 3);
        group.bench_function(format!("{r}x{k}"), |bench| bench.iter(|| newton_schulz_orthogonalize(black_box(&g), 5)));
    }
    group.finish();
}

fn model_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    for depth in [2, 4] {
        let cfg = ModelConfig {
            vocab: 64,
            context: 32,
            ..ModelConfig::desk(depth)
        };
        let params = build_params(&cfg, 0).unwrap();
        let graph = ModelGraph::build(&cfg, 8, 32).unwrap();
        let batch = random_batch(8, 32, cfg.vocab, &mut rng(4)).unwrap();
        group.bench_function(format!("forward_d{depth}"), |bench| {
            bench.iter(|| graph.forward(&params, black_box(&batch), cfg.vocab).unwrap())
        });
        group.bench_function(format!("forward_backward_d{depth}"), |bench| {
            bench.iter(|| {
                let vals = graph.forward(&params, &batch, cfg.vocab).unwrap();
                graph.graph.backward(&vals, &Mat::filled(1, 1, 1.0)).unwrap()
            })
        });
    }
    group.finish();
}

fn fits(c: &mut Criterion) {
    let pts = sweep_points();
    let curve = reference_data::muon_compute_curve();
    c.bench_function("fit_quadratic_loglr", |b| b.iter(|| fit_quadratic_loglr(black_box(&pts)).unwrap()));
    c.bench_function("fit_power_law_floor", |b| b.iter(|| fit_power_law(black_box(&curve), true).unwrap()));
    c.bench_function("sensitivity_k4", |b| b.iter(|| sensitivity(black_box(&pts), 4).unwrap()));
}

criterion_group!(benches, matmul, newton_schulz, model_step, fits);
criterion_main!(benches);
