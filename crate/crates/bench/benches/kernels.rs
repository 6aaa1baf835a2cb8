use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use scibilic_core::mc::{mc_predict, McConfig};
use scibilic_core::ops::{conv2d, conv2d_grad};
use scibilic_core::{
    build_model, ForwardMode, NetworkWeights, RngStream, Tensor, UNetConfig, Volume,
};

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = RngStream::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform() as f32 - 0.5)
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    // Shapes met in the default network on 32×32 training patches.
    for (cin, cout, side) in [(1, 16, 32), (16, 16, 32), (32, 32, 16), (64, 128, 4)] {
        let x = random(&[16, cin, side, side], 1);
        let k = random(&[cout, cin, 3, 3], 2);
        let b = random(&[cout], 3);
        let id = format!("{cin}x{side}x{side}->{cout}");
        group.bench_with_input(BenchmarkId::new("forward", &id), &(), |bench, _| {
            bench.iter(|| conv2d(&x, &k, &b, 1, 1).unwrap())
        });
        let up = conv2d(&x, &k, &b, 1, 1).unwrap();
        group.bench_with_input(BenchmarkId::new("backward", &id), &(), |bench, _| {
            bench.iter(|| conv2d_grad(&x, &k, &b, 1, 1, &up).unwrap())
        });
    }
    group.finish();
}

fn default_net() -> NetworkWeights<f32> {
    build_model(&UNetConfig::default(), &mut RngStream::new(4)).unwrap()
}

fn network(c: &mut Criterion) {
    let net = default_net();
    let x = random(&[1, 1, 64, 64], 5);
    c.bench_function("unet forward 64x64", |bench| {
        let mut rng = RngStream::new(6);
        bench.iter(|| net.forward(&x, ForwardMode::McSample, &mut rng).unwrap())
    });
}

fn inference(c: &mut Criterion) {
    let net = default_net();
    let x = Volume::new(vec![64, 64], random(&[64 * 64], 7).data().to_vec()).unwrap();
    let mut group = c.benchmark_group("mc_predict 64x64");
    group.sample_size(10);
    for samples in [10, 50] {
        let cfg = McConfig {
            samples,
            ..McConfig::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(samples), &cfg, |bench, cfg| {
            bench.iter(|| mc_predict(&net, &x, cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, network, inference);
criterion_main!(benches);
