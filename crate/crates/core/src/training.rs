//! Denoising score matching over the joint (PET, MRI) input and the training loop.
//!
//! For each pair a time `t ~ U(t_floor, 1)` and noise `z ~ N(0, I)` are drawn,
//! the PET is perturbed to `x_t = x_0 + sigma(t) z` while the MRI stays clean,
//! and the loss is the mean over batch and pixels of `(sigma(t) s(x_t, y, t) + z)^2`.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::BatchSource;
use crate::rng::{normal_tensor, stream, Purpose};
use crate::score_model::{ScoreModel, ScoreNetParams};
use crate::sde::{ensure_same_shape, per_item, perturb_batch, NoiseSchedule};
use crate::{Error, Result};

/// Lower bound of the training time distribution.
pub const DEFAULT_T_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub grad_clip_norm: Option<f64>,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Probability of replacing a pair's MRI with zeros.
    pub condition_dropout: f64,
    pub t_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            total_steps: 3000,
            learning_rate: 2e-4,
            ema_decay: 0.999,
            grad_clip_norm: Some(1.0),
            checkpoint_every: 500,
            seed: 0,
            condition_dropout: 0.0,
            t_floor: DEFAULT_T_FLOOR,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_steps < 1 {
            return bad("train.total_steps must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("train.batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("train.learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad(format!("train.ema_decay must lie in (0, 1), got {}", self.ema_decay));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return bad(format!("train.grad_clip_norm must be positive, got {c}"));
            }
        }
        if !(0.0..1.0).contains(&self.condition_dropout) {
            return bad(format!(
                "train.condition_dropout must lie in [0, 1), got {}",
                self.condition_dropout
            ));
        }
        if !(self.t_floor >= 0.0 && self.t_floor < 1.0) {
            return bad(format!("train.t_floor must lie in [0, 1), got {}", self.t_floor));
        }
        Ok(())
    }
}

/// Per-item draws behind one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DsmDraws {
    pub t: Vec<f64>,
    pub sigmas: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct DsmOptions {
    pub t_floor: f64,
    pub condition_dropout: f64,
    /// Evaluate the model in training mode (dropout active).
    pub train: bool,
}

impl Default for DsmOptions {
    fn default() -> Self {
        Self {
            t_floor: DEFAULT_T_FLOOR,
            condition_dropout: 0.0,
            train: false,
        }
    }
}

/// Score-matching loss for a `(batch, h, w)` PET batch and its MRI condition,
/// deterministic given `rng_seed`. Returns a scalar tensor suitable for backprop.
pub fn dsm_loss(
    model: &impl ScoreModel,
    x0: &Tensor,
    cond: &Tensor,
    schedule: &NoiseSchedule,
    rng_seed: u64,
) -> Result<Tensor> {
    let mut rng = stream(rng_seed, Purpose::TrainStep, 0);
    dsm_loss_with(model, x0, cond, schedule, &mut rng, DsmOptions::default()).map(|(l, _)| l)
}

pub fn dsm_loss_with(
    model: &impl ScoreModel,
    x0: &Tensor,
    cond: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    opts: DsmOptions,
) -> Result<(Tensor, DsmDraws)> {
    ensure_same_shape(x0, cond, "dsm_loss batch")?;
    let dims = x0.dims();
    if dims.len() != 3 {
        return Err(Error::Dimension(format!("dsm_loss expects (batch, h, w), got {dims:?}")));
    }
    let b = dims[0];
    if b == 0 || x0.elem_count() == 0 {
        return Err(Error::Input("dsm_loss needs a non-empty batch".into()));
    }
    let t: Vec<f64> = (0..b).map(|_| rng.random_range(opts.t_floor..=1.0)).collect();
    let sigmas = t
        .iter()
        .map(|ti| schedule.sigma_at(*ti))
        .collect::<Result<Vec<_>>>()?;
    let z = normal_tensor(rng, dims, x0.dtype(), x0.device())?;
    let sig = Tensor::from_vec(sigmas.clone(), b, x0.device())?.to_dtype(x0.dtype())?;
    let x_t = perturb_batch(x0, &sig, &z)?;
    let cond = if opts.condition_dropout > 0.0 {
        let keep: Vec<f64> = (0..b)
            .map(|_| if rng.random_bool(opts.condition_dropout) { 0.0 } else { 1.0 })
            .collect();
        let keep = Tensor::from_vec(keep, b, x0.device())?.to_dtype(x0.dtype())?;
        cond.broadcast_mul(&per_item(&keep, 3)?)?
    } else {
        cond.clone()
    };
    let score = if opts.train {
        model.score_train(&x_t, &cond, &t, rng)?
    } else {
        model.score(&x_t, &cond, &t)?
    }
    .to_dtype(x0.dtype())?;
    ensure_same_shape(&score, &x_t, "score output")?;
    let residual = (score.broadcast_mul(&per_item(&sig, 3)?)? + z)?;
    let loss = residual.sqr()?.mean_all()?;
    Ok((loss, DsmDraws { t, sigmas }))
}

/// Adam moments keyed like the parameters.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

/// Adaptive-moment optimizer with optional global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState::default(),
        }
    }

    pub fn with_state(mut self, state: AdamState) -> Self {
        self.state = state;
        self
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn step(&mut self, params: &ScoreNetParams, grads: &GradStore, clip: Option<f64>) -> Result<f64> {
        let mut collected = Vec::with_capacity(params.live.len());
        let mut sq = 0.0f64;
        for (name, var) in &params.live {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
                collected.push((name, var, g.clone()));
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Input(format!("non-finite gradient norm {norm}")));
        }
        let scale = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var, g) in collected {
            let g = (g * scale)?;
            let m = match self.state.first_moment.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.state.second_moment.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            let next = (var.as_tensor().detach() - (update * self.learning_rate)?)?;
            var.set(&next)?;
            self.state.first_moment.insert(name.clone(), m);
            self.state.second_moment.insert(name.clone(), v);
        }
        Ok(norm)
    }
}

/// One line of the loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub sigma_mean: f64,
}

pub enum TrainEvent<'a> {
    Step(&'a LossRecord),
    Checkpoint {
        params: &'a ScoreNetParams,
        optimizer: &'a Adam,
    },
}

/// Epoch-wise seeded permutations; position `p` of the infinite stream is item
/// `perm(p / n)[p % n]`, so batches depend only on `(seed, step)`.
struct Shuffler {
    n: usize,
    seed: u64,
    epoch: Option<(u64, Vec<usize>)>,
}

impl Shuffler {
    fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, epoch: None }
    }

    fn item(&mut self, position: u64) -> usize {
        let epoch = position / self.n as u64;
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.n).collect();
            perm.shuffle(&mut stream(self.seed, Purpose::Shuffle, epoch));
            self.epoch = Some((epoch, perm));
        }
        self.epoch.as_ref().expect("set above").1[(position % self.n as u64) as usize]
    }

    fn batch(&mut self, step: u64, size: usize) -> Vec<usize> {
        (0..size as u64).map(|j| self.item(step * size as u64 + j)).collect()
    }
}

/// Runs `cfg.total_steps` optimizer steps starting from `params.step_count`.
///
/// `model` must be built over `params.live` so updates are visible to it.
/// Resuming from a saved `(params, optimizer)` reproduces the uninterrupted run.
#[allow(clippy::too_many_arguments)]
pub fn train<M, D>(
    model: &M,
    params: &mut ScoreNetParams,
    optimizer: &mut Adam,
    data: &D,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    dtype: DType,
    mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<Vec<LossRecord>>
where
    M: ScoreModel,
    D: BatchSource + ?Sized,
{
    cfg.validate()?;
    schedule.validate()?;
    params.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    let device = Device::Cpu;
    let mut shuffler = Shuffler::new(data.len(), cfg.seed);
    let opts = DsmOptions {
        t_floor: cfg.t_floor,
        condition_dropout: cfg.condition_dropout,
        train: true,
    };
    let mut history = Vec::with_capacity(cfg.total_steps as usize);
    for _ in 0..cfg.total_steps {
        let step = params.step_count;
        let indices = shuffler.batch(step, cfg.batch_size);
        let (x0, cond) = data.batch(&indices, dtype, &device)?;
        let mut rng = stream(cfg.seed, Purpose::TrainStep, step);
        let (loss, draws) = dsm_loss_with(model, &x0, &cond, schedule, &mut rng, opts)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                loss: value,
                sigmas: draws.sigmas,
            });
        }
        let grads = loss.backward()?;
        optimizer.learning_rate = cfg.learning_rate;
        optimizer.step(params, &grads, cfg.grad_clip_norm)?;
        params.update_ema(cfg.ema_decay)?;
        params.step_count += 1;
        let record = LossRecord {
            step: params.step_count,
            loss: value,
            sigma_mean: draws.sigmas.iter().sum::<f64>() / draws.sigmas.len() as f64,
        };
        on_event(TrainEvent::Step(&record))?;
        history.push(record);
        if cfg.checkpoint_every > 0 && params.step_count % cfg.checkpoint_every == 0 {
            on_event(TrainEvent::Checkpoint { params, optimizer })?;
        }
    }
    Ok(history)
}
