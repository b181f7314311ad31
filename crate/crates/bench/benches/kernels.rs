use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pixmatch::image::{ImageTensor, LabelMap};
use pixmatch::perturb::fft::{fft2, Complex64};
use pixmatch::perturb::{perturb_augment, perturb_cutmix, perturb_fourier, AugConfig, CutMixConfig, FourierConfig};
use pixmatch::segnet::{ModelConfig, SegModel};
use pixmatch::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn image(rng: &mut ChaCha8Rng, size: usize) -> ImageTensor {
    ImageTensor::new(size, size, (0..3 * size * size).map(|_| rng.gen_range(0.0..=1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv2d");
    for &(cin, cout, size) in &[(3, 16, 64), (16, 32, 32), (32, 32, 16)] {
        let x = random(&mut rng, &[1, cin, size, size]);
        let w = random(&mut rng, &[cout, cin, 3, 3]);
        let b = random(&mut rng, &[cout]);
        let id = format!("{cin}x{size}->{cout}");
        group.bench_function(BenchmarkId::new("forward_backward", id), |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
                let y = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
                let s = tape.sum(y);
                tape.backward(s).unwrap();
                black_box(tape.grad(wv).is_some())
            })
        });
    }
    group.finish();
}

fn fft(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("fft2");
    for &(h, w) in &[(64, 64), (63, 65)] {
        let data: Vec<Complex64> = (0..h * w).map(|_| Complex64::new(rng.gen(), rng.gen())).collect();
        group.bench_function(BenchmarkId::from_parameter(format!("{h}x{w}")), |bench| {
            bench.iter(|| fft2(black_box(&data), h, w))
        });
    }
    group.finish();
}

fn perturbations(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (xt, xs) = (image(&mut rng, 64), image(&mut rng, 64));
    let (yt, ys) = (LabelMap::filled(64, 64, 1), LabelMap::filled(64, 64, 2));
    let mut group = c.benchmark_group("perturb");
    let aug = AugConfig::default();
    group.bench_function("augment", |bench| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        bench.iter(|| perturb_augment(&xt, &yt, &aug, &mut rng).unwrap())
    });
    let cut = CutMixConfig::default();
    group.bench_function("cutmix", |bench| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        bench.iter(|| perturb_cutmix(&xt, &yt, &xs, &ys, &cut, &mut rng).unwrap())
    });
    let fourier = FourierConfig::default();
    group.bench_function("fourier", |bench| bench.iter(|| perturb_fourier(&xt, &yt, &xs, &fourier).unwrap()));
    group.finish();
}

fn model(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = SegModel::new(5, &ModelConfig::default()).unwrap();
    let x = image(&mut rng, 64);
    c.bench_function("segnet_predict_64", |bench| bench.iter(|| net.predict(black_box(&x)).unwrap()));
}

criterion_group!(benches, conv, fft, perturbations, model);
criterion_main!(benches);
