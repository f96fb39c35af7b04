//! Predictor-corrector sampling conditioned on a fixed MRI.
//!
//! Levels are one-based, `sigma_1 < ... < sigma_N`, with `sigma_0 = 0`. For
//! `i = N-1 .. 0` the reverse-diffusion predictor moves from level `i+1` to
//! level `i`, then `M` Langevin corrector steps run at level `max(i, 1)`. The
//! MRI is never modified; it only enters through the score.

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{normal_batch, stream, Purpose};
use crate::score_model::ScoreModel;
use crate::sde::{ensure_same_shape, per_item, NoiseSchedule};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerInit {
    /// `x_N ~ N(0, sigma_max^2 I)`.
    #[default]
    Noise,
    /// `x_N = mri + sigma_max z`.
    MriPlusNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub corrector_steps: usize,
    pub snr: f64,
    pub seed: u64,
    pub conditional: bool,
    pub init: SamplerInit,
    /// Final clamp range; `None` leaves samples unclipped.
    pub clip: Option<[f64; 2]>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 1000,
            corrector_steps: 1,
            snr: 0.16,
            seed: 0,
            conditional: true,
            init: SamplerInit::Noise,
            clip: Some([0.0, 1.0]),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.num_steps != schedule.num_steps {
            return Err(Error::Config(format!(
                "sampler.num_steps ({}) must equal schedule.num_steps ({})",
                self.num_steps, schedule.num_steps
            )));
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return Err(Error::Config(format!("sampler.snr must be positive, got {}", self.snr)));
        }
        if let Some([lo, hi]) = self.clip {
            if !(lo < hi) {
                return Err(Error::Config(format!("sampler.clip range [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }
}

/// Langevin step size `2 (r |z| / |s|)^2`; zero when the score vanishes.
pub fn langevin_step_size(snr: f64, noise_norm: f64, score_norm: f64) -> f64 {
    if score_norm == 0.0 {
        return 0.0;
    }
    2.0 * (snr * noise_norm / score_norm).powi(2)
}

/// One entry of the optional trajectory log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub i: usize,
    pub sigma: f64,
    /// Mean over the batch of `|x_i - x_{i+1}|_2` across the predictor and corrector updates.
    pub residual_norm: f64,
}

fn as_batch(x: &Tensor) -> Result<(Tensor, bool)> {
    match x.rank() {
        2 => Ok((x.unsqueeze(0)?, true)),
        3 => Ok((x.clone(), false)),
        r => Err(Error::Dimension(format!("expected (h, w) or (batch, h, w), got rank {r}"))),
    }
}

fn per_item_norms(x: &Tensor) -> Result<Vec<f64>> {
    let b = x.dim(0)?;
    let sq: Vec<f64> = x
        .to_dtype(DType::F64)?
        .sqr()?
        .reshape((b, ()))?
        .sum(1)?
        .to_vec1()?;
    Ok(sq.into_iter().map(f64::sqrt).collect())
}

fn score_at(model: &impl ScoreModel, x: &Tensor, mri: &Tensor, t: f64) -> Result<Tensor> {
    let b = x.dim(0)?;
    // Detached so a trajectory never accumulates an autograd graph.
    let s = model.score(x, mri, &vec![t; b])?.detach();
    ensure_same_shape(&s, x, "score output")?;
    Ok(s.to_dtype(x.dtype())?)
}

/// Reverse-diffusion update from level `i + 1` to level `i` with noise `z`.
pub fn predictor_step(
    model: &impl ScoreModel,
    x_next: &Tensor,
    mri: &Tensor,
    i: usize,
    schedule: &NoiseSchedule,
    z: &Tensor,
) -> Result<Tensor> {
    if i >= schedule.num_steps {
        return Err(Error::Domain(format!(
            "predictor index {i} outside 0..{}",
            schedule.num_steps
        )));
    }
    ensure_same_shape(x_next, mri, "predictor inputs")?;
    ensure_same_shape(x_next, z, "predictor noise")?;
    let (x, single) = as_batch(x_next)?;
    let (y, _) = as_batch(mri)?;
    let (zb, _) = as_batch(z)?;
    let hi = schedule.level_sigma(i + 1)?;
    let lo = schedule.level_sigma(i)?;
    let var = hi * hi - lo * lo;
    let s = score_at(model, &x, &y, schedule.level_time(i + 1))?;
    let out = ((x + (s * var)?)? + (zb * var.sqrt())?)?;
    Ok(if single { out.squeeze(0)? } else { out })
}

/// One Langevin update at level `max(i, 1)` with noise `z`; returns the new
/// state and the per-item step sizes.
pub fn corrector_step(
    model: &impl ScoreModel,
    x: &Tensor,
    mri: &Tensor,
    i: usize,
    schedule: &NoiseSchedule,
    snr: f64,
    z: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    if !(snr > 0.0) {
        return Err(Error::Config(format!("snr must be positive, got {snr}")));
    }
    if i >= schedule.num_steps {
        return Err(Error::Domain(format!(
            "corrector index {i} outside 0..{}",
            schedule.num_steps
        )));
    }
    ensure_same_shape(x, mri, "corrector inputs")?;
    ensure_same_shape(x, z, "corrector noise")?;
    let (xb, single) = as_batch(x)?;
    let (y, _) = as_batch(mri)?;
    let (zb, _) = as_batch(z)?;
    let level = i.max(1);
    let s = score_at(model, &xb, &y, schedule.level_time(level))?;
    let z_norms = per_item_norms(&zb)?;
    let s_norms = per_item_norms(&s)?;
    let eps: Vec<f64> = z_norms
        .iter()
        .zip(&s_norms)
        .map(|(zn, sn)| {
            if *sn == 0.0 {
                log::warn!("score norm is zero at level {level}; corrector step skipped");
            }
            langevin_step_size(snr, *zn, *sn)
        })
        .collect();
    let dtype = xb.dtype();
    let eps_t = per_item(&Tensor::from_vec(eps.clone(), eps.len(), xb.device())?.to_dtype(dtype)?, 3)?;
    let noise_scale = per_item(
        &Tensor::from_vec(eps.iter().map(|e| (2.0 * e).sqrt()).collect::<Vec<_>>(), eps.len(), xb.device())?
            .to_dtype(dtype)?,
        3,
    )?;
    let out = ((&xb + s.broadcast_mul(&eps_t)?)? + zb.broadcast_mul(&noise_scale)?)?;
    Ok((if single { out.squeeze(0)? } else { out }, eps))
}

fn ensure_finite(x: &Tensor, step: usize, sigma: f64, phase: &'static str) -> Result<()> {
    let total = x.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteSample { step, sigma, phase })
    }
}

/// Synthesizes PET for `mri` (`(h, w)` or `(batch, h, w)`), deterministic given `cfg.seed`.
pub fn pc_sample(
    model: &impl ScoreModel,
    mri: &Tensor,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    pc_sample_observed(model, mri, schedule, cfg, 0, &mut |_| Ok(()))
}

/// As [`pc_sample`]; item `b` of the batch draws from the stream
/// `(cfg.seed, first_index + b)` so results do not depend on batching.
pub fn pc_sample_observed(
    model: &impl ScoreModel,
    mri: &Tensor,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    first_index: u64,
    observer: &mut dyn FnMut(&StepTrace) -> Result<()>,
) -> Result<Tensor> {
    schedule.validate()?;
    cfg.validate(schedule)?;
    let (y, single) = as_batch(mri)?;
    let (b, h, w) = y.dims3()?;
    let dtype = y.dtype();
    let device = y.device().clone();
    let mut rngs: Vec<ChaCha8Rng> = (0..b as u64)
        .map(|k| stream(cfg.seed, Purpose::Sample, first_index + k))
        .collect();
    let sigma_max = schedule.sigma_max;
    let init_noise = (normal_batch(&mut rngs, &[h, w], dtype, &device)? * sigma_max)?;
    let mut x = match cfg.init {
        SamplerInit::Noise => init_noise,
        SamplerInit::MriPlusNoise => (&y + init_noise)?,
    };
    for i in (0..schedule.num_steps).rev() {
        let before = x.clone();
        let z = normal_batch(&mut rngs, &[h, w], dtype, &device)?;
        x = predictor_step(model, &x, &y, i, schedule, &z)?;
        let sigma = schedule.level_sigma(i.max(1))?;
        ensure_finite(&x, i, sigma, "predictor")?;
        for _ in 0..cfg.corrector_steps {
            let z = normal_batch(&mut rngs, &[h, w], dtype, &device)?;
            x = corrector_step(model, &x, &y, i, schedule, cfg.snr, &z)?.0;
            ensure_finite(&x, i, sigma, "corrector")?;
        }
        let residual = per_item_norms(&(&x - &before)?)?;
        observer(&StepTrace {
            i,
            sigma,
            residual_norm: residual.iter().sum::<f64>() / b as f64,
        })?;
    }
    if let Some([lo, hi]) = cfg.clip {
        x = x.clamp(lo, hi)?;
    }
    Ok(if single { x.squeeze(0)? } else { x })
}

/// The same loop with the MRI channel replaced by zeros.
pub fn sample_unconditional(
    model: &impl ScoreModel,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    shape: &[usize],
    dtype: DType,
) -> Result<Tensor> {
    sample_unconditional_observed(model, schedule, cfg, shape, dtype, 0, &mut |_| Ok(()))
}

pub fn sample_unconditional_observed(
    model: &impl ScoreModel,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    shape: &[usize],
    dtype: DType,
    first_index: u64,
    observer: &mut dyn FnMut(&StepTrace) -> Result<()>,
) -> Result<Tensor> {
    if cfg.conditional {
        return Err(Error::Config(
            "sample_unconditional requires sampler.conditional = false".into(),
        ));
    }
    let zeros = Tensor::zeros(shape, dtype, &candle_core::Device::Cpu)?;
    pc_sample_observed(model, &zeros, schedule, cfg, first_index, observer)
}
