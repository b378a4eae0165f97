//! Parallel vs sequential throughput of the hot kernels. The two modes
//! produce bitwise-identical outputs; this measures what the rayon
//! partitioning buys on the current machine.

use std::hint::black_box;

use cmunet::par;
use cmunet::tensor::{batchnorm2d, conv2d, BnState, Conv2dSpec, Mode, Tape, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};

fn filled(shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    // Cheap deterministic fill; the kernels are data-oblivious.
    let data: Vec<f32> = (0..n).map(|i| ((i * 2654435761) % 1000) as f32 / 500.0 - 1.0).collect();
    Tensor::from_vec(data, shape).unwrap()
}

fn modes() -> [(&'static str, Option<usize>); 2] {
    [("seq", Some(1)), ("par", None)]
}

fn bench_conv_forward(c: &mut Criterion) {
    let x = filled(&[1, 32, 64, 64]);
    let w = filled(&[32, 32, 3, 3]);
    let b = filled(&[32]);
    let mut group = c.benchmark_group("conv2d_3x3_32ch_64px");
    for (label, threads) in modes() {
        par::set_thread_override(threads);
        group.bench_function(label, |bench| {
            bench.iter(|| {
                let mut tape = Tape::no_grad();
                black_box(conv2d(&mut tape, &x, &w, Some(&b), Conv2dSpec::same(3)).unwrap())
            })
        });
    }
    par::set_thread_override(None);
    group.finish();
}

fn bench_conv_backward(c: &mut Criterion) {
    let x = filled(&[1, 16, 64, 64]);
    let w = filled(&[16, 16, 3, 3]);
    let b = filled(&[16]);
    x.set_requires_grad(true);
    w.set_requires_grad(true);
    b.set_requires_grad(true);
    let mut group = c.benchmark_group("conv2d_backward_16ch_64px");
    for (label, threads) in modes() {
        par::set_thread_override(threads);
        group.bench_function(label, |bench| {
            bench.iter(|| {
                x.zero_grad();
                w.zero_grad();
                b.zero_grad();
                let mut tape = Tape::new();
                let y = conv2d(&mut tape, &x, &w, Some(&b), Conv2dSpec::same(3)).unwrap();
                let s = cmunet::tensor::sum(&mut tape, &y);
                tape.backward(&s).unwrap();
                black_box(w.grad())
            })
        });
    }
    par::set_thread_override(None);
    group.finish();
}

fn bench_batchnorm(c: &mut Criterion) {
    let x = filled(&[4, 64, 64, 64]);
    let gamma = Tensor::full(&[64], 1.0f32).unwrap();
    let beta = Tensor::zeros(&[64]).unwrap();
    let mut group = c.benchmark_group("batchnorm2d_64ch_64px");
    for (label, threads) in modes() {
        par::set_thread_override(threads);
        group.bench_function(label, |bench| {
            bench.iter(|| {
                let state = BnState::new(64);
                let mut tape = Tape::no_grad();
                black_box(
                    batchnorm2d(&mut tape, &x, &gamma, &beta, &state, Mode::Train, 1e-5, 0.1)
                        .unwrap(),
                )
            })
        });
    }
    par::set_thread_override(None);
    group.finish();
}

criterion_group!(benches, bench_conv_forward, bench_conv_backward, bench_batchnorm);
criterion_main!(benches);
