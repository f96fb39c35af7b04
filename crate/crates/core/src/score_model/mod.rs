//! Joint score estimator `s(x_t, y, t)` over a two-channel (noisy PET, MRI) input.

mod checkpoint;
pub mod conv;
pub mod layers;
pub mod params;
mod unet;

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, read_meta, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT};
pub use params::{Init, ParamSource, ScoreNetParams};
pub use unet::{build_unet, build_unet_with_dtype, score_forward, ScoreNet, UNetConfig, Weights};

use crate::Result;

/// Anything that estimates `grad_x log p_t(x, y)` for a batch.
///
/// `x_t` and `cond` are `(batch, h, w)`; `t` holds one time per batch item.
pub trait ScoreModel {
    fn score(&self, x_t: &Tensor, cond: &Tensor, t: &[f64]) -> Result<Tensor>;

    /// Training-mode evaluation; stochastic layers draw from `rng`.
    fn score_train(&self, x_t: &Tensor, cond: &Tensor, t: &[f64], rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let _ = rng;
        self.score(x_t, cond, t)
    }
}

impl<M: ScoreModel + ?Sized> ScoreModel for &M {
    fn score(&self, x_t: &Tensor, cond: &Tensor, t: &[f64]) -> Result<Tensor> {
        (**self).score(x_t, cond, t)
    }

    fn score_train(&self, x_t: &Tensor, cond: &Tensor, t: &[f64], rng: &mut ChaCha8Rng) -> Result<Tensor> {
        (**self).score_train(x_t, cond, t, rng)
    }
}

/// Adapts a closure into a [`ScoreModel`].
pub struct FnScore<F>(pub F);

impl<F> ScoreModel for FnScore<F>
where
    F: Fn(&Tensor, &Tensor, &[f64]) -> Result<Tensor>,
{
    fn score(&self, x_t: &Tensor, cond: &Tensor, t: &[f64]) -> Result<Tensor> {
        (self.0)(x_t, cond, t)
    }
}
