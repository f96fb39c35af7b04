use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use petsynth_bench::{desk_net, phantoms, stacked};
use petsynth_core::rng::{normal_tensor, stream, Purpose};
use petsynth_core::score_model::conv::Conv2d;
use petsynth_core::score_model::{ParamSource, ScoreModel};
use petsynth_core::training::dsm_loss;
use petsynth_core::{DType, Device, NoiseSchedule};

fn conv(c: &mut Criterion) {
    let src = ParamSource::fresh(DType::F32, 0);
    let layer = Conv2d::new(&src, 32, 32, 3, 1).unwrap();
    let x = normal_tensor(&mut stream(0, Purpose::Check, 0), &[8, 32, 32, 32], DType::F32, &Device::Cpu).unwrap();
    c.bench_function("conv3x3_32ch_32x32_batch8", |b| b.iter(|| layer.forward(black_box(&x)).unwrap()));
}

fn unet(c: &mut Criterion) {
    let schedule = NoiseSchedule::default();
    let (_, net) = desk_net(&schedule);
    let (pet, mri) = stacked(&phantoms(8, 32));
    let t = [0.5; 8];
    c.bench_function("desk_unet_forward_batch8", |b| b.iter(|| net.score(black_box(&pet), &mri, &t).unwrap()));

    let mut group = c.benchmark_group("slow");
    group.sample_size(10);
    group.bench_function("desk_dsm_forward_backward_batch8", |b| {
        b.iter(|| dsm_loss(&net, &pet, &mri, &schedule, 0).unwrap().backward().unwrap())
    });
    group.finish();
}

criterion_group!(benches, conv, unet);
criterion_main!(benches);
