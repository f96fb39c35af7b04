use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use petsynth_bench::{desk_net, phantoms, stacked};
use petsynth_core::metrics::{psnr, ssim};
use petsynth_core::rng::{normal_tensor, stream, Purpose};
use petsynth_core::sampler::{corrector_step, predictor_step};
use petsynth_core::{DType, Device, NoiseSchedule};

fn sampler_step(c: &mut Criterion) {
    let schedule = NoiseSchedule::default();
    let (_, net) = desk_net(&schedule);
    let (pet, mri) = stacked(&phantoms(8, 32));
    let z = normal_tensor(&mut stream(0, Purpose::Check, 0), &[8, 32, 32], DType::F32, &Device::Cpu).unwrap();
    let mut group = c.benchmark_group("sampler");
    group.sample_size(20);
    group.bench_function("predictor_plus_corrector_batch8", |b| {
        b.iter(|| {
            let x = predictor_step(&net, black_box(&pet), &mri, 500, &schedule, &z).unwrap();
            corrector_step(&net, &x, &mri, 500, &schedule, 0.16, &z).unwrap()
        })
    });
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let a = phantoms(2, 128);
    let (x, y) = (&a[0].pet, &a[1].pet);
    c.bench_function("psnr_128", |b| b.iter(|| psnr(black_box(x.view()), y.view(), 1.0).unwrap()));
    c.bench_function("ssim_128", |b| b.iter(|| ssim(black_box(x.view()), y.view(), 1.0).unwrap()));
}

criterion_group!(benches, sampler_step, metrics);
criterion_main!(benches);
