//! Hot kernels on a one-thread rayon pool versus the default pool.
//! Build with `--no-default-features` for the fully sequential fallback.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mseg_core::autodiff::Tape;
use mseg_core::net25d::{build_net25d, Net25DConfig};
use mseg_core::phantom::{generate_phantom, PhantomSpec};
use mseg_core::projection::{make_angles, mip, sum_project, Backprojector, Span};
use mseg_core::unet::UNetConfig;
use mseg_core::Tensor;
use rayon::ThreadPoolBuilder;

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let mut v = vec![("1-thread".to_string(), ThreadPoolBuilder::new().num_threads(1).build().unwrap())];
    let n = rayon::current_num_threads();
    if n > 1 {
        v.push((format!("{n}-threads"), ThreadPoolBuilder::new().num_threads(n).build().unwrap()));
    }
    v
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv3d_16ch_32cubed");
    let x = Tensor::full(&[1, 8, 32, 32, 32], 0.5f32);
    let w = Tensor::full(&[16, 8, 3, 3, 3], 0.01f32);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            pool.install(|| {
                b.iter(|| {
                    let mut tape = Tape::new();
                    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
                    black_box(tape.conv(xv, wv, None, true).unwrap());
                })
            })
        });
    }
    g.finish();
}

fn projection(c: &mut Criterion) {
    let v = generate_phantom(&PhantomSpec::default(), 0).unwrap().volume;
    let angles = make_angles(12, Span::Half).unwrap().angles;
    let imgs: Vec<Tensor<f32>> = angles.iter().map(|&a| Tensor::from_vec(&[1, 1, 64, 64], sum_project(&v, a).data).unwrap()).collect();
    let bp = Backprojector::new(&angles, [32, 64, 64]);
    let mut g = c.benchmark_group("projection_32x64x64_p12");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::new("mip", &name), |b| {
            pool.install(|| b.iter(|| angles.iter().map(|&a| mip(&v, a)).collect::<Vec<_>>()))
        });
        g.bench_function(BenchmarkId::new("backproject", &name), |b| {
            pool.install(|| {
                b.iter(|| {
                    let mut tape = Tape::new();
                    let vars: Vec<_> = imgs.iter().map(|t| tape.constant(t.clone())).collect();
                    black_box(tape.linear_op(&vars, bp.clone()));
                })
            })
        });
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let cfg = Net25DConfig { p: 4, unet: UNetConfig { base_filters: 8, depth: 3, ..UNetConfig::paper_2d() }, ..Net25DConfig::default() };
    let net = build_net25d(&cfg, 0).unwrap();
    let v = generate_phantom(&PhantomSpec::default(), 1).unwrap().volume;
    let mut g = c.benchmark_group("net25d_forward_p4");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| pool.install(|| b.iter(|| black_box(net.forward(&v).unwrap()))));
    }
    g.finish();
}

criterion_group!(benches, conv, projection, forward);
criterion_main!(benches);
