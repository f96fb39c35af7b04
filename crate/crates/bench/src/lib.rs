//! Shared fixtures for the benchmarks.

use petsynth_core::data::{array_to_tensor, gen_phantom, PairedSlice};
use petsynth_core::score_model::{build_unet, ScoreNet, ScoreNetParams, UNetConfig, Weights};
use petsynth_core::{DType, Device, NoiseSchedule, Tensor};

/// Desk U-Net over fresh weights together with its parameters.
pub fn desk_net(schedule: &NoiseSchedule) -> (ScoreNetParams, ScoreNet) {
    let cfg = UNetConfig::desk();
    let params = build_unet(&cfg, 0).expect("desk config is valid");
    let net = ScoreNet::from_params(&cfg, schedule, &params, Weights::Live).expect("fresh parameters fit");
    (params, net)
}

pub fn phantoms(count: usize, size: usize) -> Vec<PairedSlice> {
    gen_phantom(count, size, 0).expect("valid phantom size")
}

/// Stacks the PET and MRI slices as `(pet, mri)` f32 batches.
pub fn stacked(slices: &[PairedSlice]) -> (Tensor, Tensor) {
    let to_tensor = |a| array_to_tensor(a, DType::F32, &Device::Cpu).expect("finite");
    let pet: Vec<Tensor> = slices.iter().map(|s| to_tensor(&s.pet)).collect();
    let mri: Vec<Tensor> = slices.iter().map(|s| to_tensor(&s.mri)).collect();
    (
        Tensor::stack(&pet, 0).expect("same shapes"),
        Tensor::stack(&mri, 0).expect("same shapes"),
    )
}
