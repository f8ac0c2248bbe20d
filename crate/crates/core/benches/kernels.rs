use autofocus::autodiff::Graph;
use autofocus::conv::{self, ConvGeometry};
use autofocus::layers::{graph as lg, AutofocusConfig};
use autofocus::{Exec, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn ramp(shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_values(shape, (0..n).map(|i| ((i * 7919 % 1000) as f64 / 500.0 - 1.0) * scale).collect()).unwrap()
}

fn conv_kernels(c: &mut Criterion) {
    let x = ramp(&[1, 16, 24, 24, 24], 1.0);
    let w = ramp(&[16, 16, 3, 3, 3], 0.1);
    let geom = ConvGeometry::same([3; 3], 2).unwrap();
    let y = conv::forward(Exec::Sequential, &x, &w, None, &geom).unwrap();

    let mut group = c.benchmark_group("conv3d_16x24^3_r2");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new("forward", name), &exec, |b, &e| {
            b.iter(|| conv::forward(e, black_box(&x), &w, None, &geom).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("backward_input", name), &exec, |b, &e| {
            b.iter(|| conv::backward_input(e, black_box(&y), &w, x.shape(), &geom).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("backward_weight", name), &exec, |b, &e| {
            b.iter(|| conv::backward_weight(e, black_box(&y), &x, &geom).unwrap())
        });
    }
    group.finish();
}

fn autofocus_step(c: &mut Criterion) {
    let cfg = AutofocusConfig::new(vec![2, 6, 10, 14], 12, 12).unwrap();
    let x = ramp(&[1, 12, 20, 20, 20], 1.0);
    let kernel = ramp(&cfg.branch_spec(0).kernel_shape(), 0.1);
    let c1 = ramp(&cfg.attention_conv1_spec().kernel_shape(), 0.1);
    let c2 = ramp(&cfg.attention_conv2_spec().kernel_shape(), 0.1);

    let mut group = c.benchmark_group("autofocus_k4_12x20^3");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new("forward_backward", name), &exec, |b, &e| {
            b.iter(|| {
                let mut g = Graph::with_exec(e);
                let xn = g.input(x.clone());
                let k = g.param("kernel", kernel.clone()).unwrap();
                let att = lg::AttentionNodes {
                    conv1_kernel: g.param("c1", c1.clone()).unwrap(),
                    conv1_bias: None,
                    conv2_kernel: g.param("c2", c2.clone()).unwrap(),
                    conv2_bias: None,
                };
                let (y, _) = lg::autofocus(&mut g, xn, &cfg, k, None, &att).unwrap();
                let loss = g.mean(y);
                g.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv_kernels, autofocus_step);
criterion_main!(benches);
