//! The sampler driven by the joint Gaussian score behaves as a conditional sampler.

use petsynth_core::oracle::{GaussianSpec, PixelJointGaussianScore};
use petsynth_core::sampler::{pc_sample, SamplerConfig};
use petsynth_core::{DType, Device, NoiseSchedule, Tensor};

fn mean_and_var(x: &Tensor) -> (f64, f64) {
    let v: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn conditional_mean_tracks_the_condition() {
    let schedule = NoiseSchedule::new(0.01, 10.0, 300).unwrap();
    let spec = GaussianSpec::bivariate([0.0, 0.0], [1.0, 1.0], 0.6).unwrap();
    let oracle = PixelJointGaussianScore::new(spec, schedule).unwrap();
    let cfg = SamplerConfig {
        num_steps: 300,
        clip: None,
        seed: 2,
        ..SamplerConfig::default()
    };
    for y in [-1.5, 0.0, 2.0] {
        let cond = Tensor::full(y, (48, 48), &Device::Cpu).unwrap().to_dtype(DType::F64).unwrap();
        let x = pc_sample(&oracle, &cond, &schedule, &cfg).unwrap();
        let (m, v) = mean_and_var(&x);
        // x | y ~ N(0.6 y, 0.64).
        assert!((m - 0.6 * y).abs() < 0.05, "y={y}: mean {m}");
        assert!((v - 0.64).abs() < 0.15 * 0.64, "y={y}: var {v}");
    }
}

#[test]
fn pixelwise_conditions_give_pixelwise_means() {
    let schedule = NoiseSchedule::new(0.01, 10.0, 300).unwrap();
    let spec = GaussianSpec::bivariate([0.5, 0.5], [0.04, 0.04], 0.9).unwrap();
    let oracle = PixelJointGaussianScore::new(spec, schedule).unwrap();
    let cfg = SamplerConfig {
        num_steps: 300,
        clip: None,
        ..SamplerConfig::default()
    };
    // Left half conditioned low, right half high.
    let cond = Tensor::from_vec(
        (0..64 * 64).map(|k| if k % 64 < 32 { 0.3 } else { 0.7 }).collect::<Vec<f64>>(),
        (64, 64),
        &Device::Cpu,
    )
    .unwrap();
    let x = pc_sample(&oracle, &cond, &schedule, &cfg).unwrap();
    let left = x.narrow(1, 0, 32).unwrap();
    let right = x.narrow(1, 32, 32).unwrap();
    let (ml, _) = mean_and_var(&left);
    let (mr, _) = mean_and_var(&right);
    // E[x|y] = 0.5 + 0.9 (y - 0.5).
    assert!((ml - 0.32).abs() < 0.01, "{ml}");
    assert!((mr - 0.68).abs() < 0.01, "{mr}");
}
