use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dyngraph::diff::{Prng, Tape, Tensor};
use dyngraph::features::{synth_generate, Split, SynthConfig};
use dyngraph::harness::{self, RunConfig};
use dyngraph::par;

fn modes() -> [(&'static str, bool); 2] {
    [("sequential", false), ("parallel", true)]
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = Prng::new(0);
    let x = Tensor::from_fn(&[4, 16, 32, 32], |_| rng.normal());
    let w = Tensor::from_fn(&[32, 16, 3, 3], |_| rng.normal());
    let bias = Tensor::zeros(&[32]);
    let mut group = c.benchmark_group("conv2d");
    for (name, on) in modes() {
        group.bench_function(BenchmarkId::new("forward+backward", name), |b| {
            par::set_parallel(on);
            b.iter(|| {
                let mut tape = Tape::new();
                let (xv, wv, bv) = (tape.input(x.clone()), tape.input(w.clone()), tape.input(bias.clone()));
                let y = tape.conv2d(xv, wv, bv, 1).unwrap();
                let s = tape.sum(y).unwrap();
                tape.backward(s).unwrap()
            })
        });
    }
    group.finish();
}

fn bench_model(c: &mut Criterion) {
    let (data, planted) = synth_generate(&SynthConfig { train_per_class: 4, test_per_class: 8, ..SynthConfig::default() }).unwrap();
    let cfg = RunConfig::desk();
    let model = harness::build_model(&cfg, &data).unwrap();
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    for (name, on) in modes() {
        group.bench_function(BenchmarkId::new("train_step", name), |b| {
            par::set_parallel(on);
            let batch: Vec<_> = data.split(Split::Train).into_iter().take(cfg.batch).collect();
            let mut store = model.init(0);
            b.iter(|| harness::train_step(&model, &mut store, &batch, &data, 1e-3).unwrap())
        });
        group.bench_function(BenchmarkId::new("evaluate", name), |b| {
            par::set_parallel(on);
            let store = model.init(0);
            b.iter(|| harness::evaluate(&model, &store, &data, Split::Test, Some(&planted), cfg.batch).unwrap())
        });
    }
    group.finish();
    par::set_parallel(true);
}

criterion_group!(benches, bench_conv, bench_model);
criterion_main!(benches);
