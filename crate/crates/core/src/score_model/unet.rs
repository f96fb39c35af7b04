use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conv::Conv2d;
use super::layers::{group_norm, noise_level_embedding, upsample2x, AttnBlock, Linear, ResBlock};
use super::params::{ParamSource, ScoreNetParams};
use super::ScoreModel;
use crate::sde::{check_time, ensure_same_shape, per_item, NoiseSchedule};
use crate::{Error, Result};

/// Architecture of the two-channel (PET, MRI) score U-Net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub base_channels: usize,
    /// One multiplier per resolution level, finest first.
    pub channel_multipliers: Vec<usize>,
    pub num_res_blocks_per_level: usize,
    /// Level indices (0 = finest) that carry self-attention.
    pub attention_levels: Vec<usize>,
    pub groupnorm_groups: usize,
    pub dropout_rate: f64,
    pub time_embedding_dim: usize,
    pub input_channels: usize,
    pub output_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl UNetConfig {
    /// Three levels, 32 base channels, attention at the coarsest level; sized for 32x32.
    pub fn desk() -> Self {
        Self {
            base_channels: 32,
            channel_multipliers: vec![1, 2, 2],
            num_res_blocks_per_level: 1,
            attention_levels: vec![2],
            groupnorm_groups: 8,
            dropout_rate: 0.1,
            time_embedding_dim: 128,
            input_channels: 2,
            output_channels: 1,
        }
    }

    /// Four levels, 64 base channels; sized for 128x128.
    pub fn large() -> Self {
        Self {
            base_channels: 64,
            channel_multipliers: vec![1, 2, 2, 2],
            attention_levels: vec![3],
            time_embedding_dim: 256,
            ..Self::desk()
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    /// Spatial dimensions must be multiples of this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_channels != 2 {
            return bad(format!("input_channels is fixed to 2, got {}", self.input_channels));
        }
        if self.output_channels != 1 {
            return bad(format!("output_channels is fixed to 1, got {}", self.output_channels));
        }
        if self.base_channels == 0 || self.channel_multipliers.is_empty() {
            return bad("base_channels and channel_multipliers must be non-empty".into());
        }
        if self.channel_multipliers.contains(&0) {
            return bad("channel multipliers must be positive".into());
        }
        if self.num_res_blocks_per_level == 0 {
            return bad("num_res_blocks_per_level must be at least 1".into());
        }
        if let Some(l) = self.attention_levels.iter().find(|l| **l >= self.levels()) {
            return bad(format!("attention level {l} outside 0..{}", self.levels()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if self.time_embedding_dim < 2 || self.time_embedding_dim % 2 != 0 {
            return bad(format!(
                "time_embedding_dim must be even and >= 2, got {}",
                self.time_embedding_dim
            ));
        }
        let groups = self.groupnorm_groups;
        if groups == 0 {
            return bad("groupnorm_groups must be positive".into());
        }
        for channels in self.normalized_channel_counts() {
            if channels % groups != 0 {
                return bad(format!(
                    "groupnorm_groups ({groups}) does not divide a {channels}-channel activation"
                ));
            }
        }
        Ok(())
    }

    /// Channel counts seen by every GroupNorm layer, in build order.
    fn normalized_channel_counts(&self) -> Vec<usize> {
        let mut counts = Vec::new();
        let mut ch = self.base_channels;
        let mut skips = vec![ch];
        for (level, mult) in self.channel_multipliers.iter().enumerate() {
            let out = self.base_channels * mult;
            for _ in 0..self.num_res_blocks_per_level {
                counts.extend([ch, out]);
                if self.attention_levels.contains(&level) {
                    counts.push(out);
                }
                ch = out;
                skips.push(ch);
            }
            if level + 1 < self.levels() {
                skips.push(ch);
            }
        }
        for (level, mult) in self.channel_multipliers.iter().enumerate().rev() {
            let out = self.base_channels * mult;
            for _ in 0..=self.num_res_blocks_per_level {
                let skip = skips.pop().unwrap_or(0);
                counts.extend([ch + skip, out]);
                if self.attention_levels.contains(&level) {
                    counts.push(out);
                }
                ch = out;
            }
        }
        counts.push(ch);
        counts
    }
}

#[derive(Debug, Clone)]
struct Level {
    blocks: Vec<ResBlock>,
    attn: Vec<Option<AttnBlock>>,
    resample: Option<Conv2d>,
}

/// The score network: raw output `v` of the U-Net divided by `sigma(t)`.
#[derive(Debug, Clone)]
pub struct ScoreNet {
    cfg: UNetConfig,
    schedule: NoiseSchedule,
    dtype: DType,
    time_in: Linear,
    time_out: Linear,
    conv_in: Conv2d,
    down: Vec<Level>,
    up: Vec<Level>,
    out_norm: candle_nn::GroupNorm,
    conv_out: Conv2d,
}

/// Which parameter set a network is built over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weights {
    Live,
    Ema,
}

impl ScoreNet {
    pub fn new(cfg: &UNetConfig, schedule: &NoiseSchedule, src: &ParamSource, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        schedule.validate()?;
        let g = cfg.groupnorm_groups;
        let tdim = cfg.time_embedding_dim;
        let base = cfg.base_channels;
        let time_in = Linear::new(&src.pp("time.lin1"), tdim, tdim)?;
        let time_out = Linear::new(&src.pp("time.lin2"), tdim, tdim)?;
        let conv_in = Conv2d::new(&src.pp("conv_in"), cfg.input_channels, base, 3, 1)?;

        let mut ch = base;
        let mut skips = vec![ch];
        let mut down = Vec::new();
        for (level, mult) in cfg.channel_multipliers.iter().enumerate() {
            let lsrc = src.pp(format!("down.{level}"));
            let out = base * mult;
            let mut blocks = Vec::new();
            let mut attn = Vec::new();
            for r in 0..cfg.num_res_blocks_per_level {
                blocks.push(ResBlock::new(&lsrc.pp(format!("res.{r}")), ch, out, tdim, g, cfg.dropout_rate)?);
                attn.push(if cfg.attention_levels.contains(&level) {
                    Some(AttnBlock::new(&lsrc.pp(format!("attn.{r}")), out, g)?)
                } else {
                    None
                });
                ch = out;
                skips.push(ch);
            }
            let resample = if level + 1 < cfg.levels() {
                skips.push(ch);
                Some(Conv2d::new(&lsrc.pp("downsample"), ch, ch, 3, 2)?)
            } else {
                None
            };
            down.push(Level { blocks, attn, resample });
        }

        let mut up = Vec::new();
        for (level, mult) in cfg.channel_multipliers.iter().enumerate().rev() {
            let lsrc = src.pp(format!("up.{level}"));
            let out = base * mult;
            let mut blocks = Vec::new();
            let mut attn = Vec::new();
            for r in 0..=cfg.num_res_blocks_per_level {
                let skip = skips.pop().expect("skip stack mirrors the encoder");
                blocks.push(ResBlock::new(&lsrc.pp(format!("res.{r}")), ch + skip, out, tdim, g, cfg.dropout_rate)?);
                attn.push(if cfg.attention_levels.contains(&level) {
                    Some(AttnBlock::new(&lsrc.pp(format!("attn.{r}")), out, g)?)
                } else {
                    None
                });
                ch = out;
            }
            let resample = if level > 0 {
                Some(Conv2d::new(&lsrc.pp("upsample"), ch, ch, 3, 1)?)
            } else {
                None
            };
            up.push(Level { blocks, attn, resample });
        }
        let out_norm = group_norm(&src.pp("out_norm"), g, ch)?;
        let conv_out = Conv2d::new(&src.pp("conv_out"), ch, cfg.output_channels, 3, 1)?;
        Ok(Self {
            cfg: cfg.clone(),
            schedule: *schedule,
            dtype,
            time_in,
            time_out,
            conv_in,
            down,
            up,
            out_norm,
            conv_out,
        })
    }

    /// Network over the live variables (shares storage, so optimizer updates are visible).
    pub fn from_params(
        cfg: &UNetConfig,
        schedule: &NoiseSchedule,
        params: &ScoreNetParams,
        weights: Weights,
    ) -> Result<Self> {
        let tensors: BTreeMap<String, Tensor> = match weights {
            Weights::Live => params.live_tensors(),
            Weights::Ema => params.ema_tensors(),
        };
        let dtype = tensors
            .values()
            .next()
            .map(|t| t.dtype())
            .ok_or_else(|| Error::Config("empty parameter collection".into()))?;
        let expected: usize = tensors.len();
        let net = Self::new(cfg, schedule, &ParamSource::existing(tensors), dtype)?;
        let fresh = ParamSource::fresh(dtype, 0);
        Self::new(cfg, schedule, &fresh, dtype)?;
        let needed = fresh.into_vars()?.len();
        if needed != expected {
            return Err(Error::Config(format!(
                "parameter collection has {expected} tensors, architecture needs {needed}"
            )));
        }
        Ok(net)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn check_inputs(&self, x_t: &Tensor, cond: &Tensor, t: &[f64]) -> Result<(usize, usize, usize)> {
        ensure_same_shape(x_t, cond, "score network inputs")?;
        let (b, h, w) = x_t.dims3().map_err(|_| {
            Error::Dimension(format!("expected (batch, h, w) inputs, got {:?}", x_t.dims()))
        })?;
        if t.len() != b {
            return Err(Error::Dimension(format!("{} times for a batch of {b}", t.len())));
        }
        for &ti in t {
            check_time(ti)?;
        }
        let d = self.cfg.spatial_divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::Dimension(format!(
                "spatial dims {h}x{w} must be positive multiples of {d}"
            )));
        }
        Ok((b, h, w))
    }

    /// Raw network output `v` with shape `(batch, h, w)`; the score is `v / sigma(t)`.
    pub fn raw_output(
        &self,
        x_t: &Tensor,
        cond: &Tensor,
        t: &[f64],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let (b, h, w) = self.check_inputs(x_t, cond, t)?;
        let sigmas = t
            .iter()
            .map(|ti| self.schedule.sigma_at(*ti))
            .collect::<Result<Vec<_>>>()?;
        let emb = noise_level_embedding(&sigmas, self.cfg.time_embedding_dim, self.dtype)?;
        let temb = self.time_out.forward(&self.time_in.forward(&emb)?.silu()?)?.silu()?;

        let x = Tensor::stack(&[x_t.to_dtype(self.dtype)?, cond.to_dtype(self.dtype)?], 1)?;
        let mut h_act = self.conv_in.forward(&x)?;
        let mut skips = vec![h_act.clone()];
        for level in &self.down {
            for (block, attn) in level.blocks.iter().zip(&level.attn) {
                h_act = block.forward(&h_act, &temb, rng.as_deref_mut())?;
                if let Some(attn) = attn {
                    h_act = attn.forward(&h_act)?;
                }
                skips.push(h_act.clone());
            }
            if let Some(down) = &level.resample {
                h_act = down.forward(&h_act)?;
                skips.push(h_act.clone());
            }
        }
        for level in &self.up {
            for (block, attn) in level.blocks.iter().zip(&level.attn) {
                let skip = skips.pop().expect("skip stack mirrors the encoder");
                h_act = block.forward(&Tensor::cat(&[&h_act, &skip], 1)?, &temb, rng.as_deref_mut())?;
                if let Some(attn) = attn {
                    h_act = attn.forward(&h_act)?;
                }
            }
            if let Some(up) = &level.resample {
                h_act = up.forward(&upsample2x(&h_act)?)?;
            }
        }
        let v = self
            .conv_out
            .forward(&candle_nn::Module::forward(&self.out_norm, &h_act)?.silu()?)?;
        Ok(v.reshape((b, h, w))?)
    }

    fn scaled(&self, v: Tensor, t: &[f64]) -> Result<Tensor> {
        let inv: Vec<f64> = t
            .iter()
            .map(|ti| self.schedule.sigma_at(*ti).map(|s| 1.0 / s))
            .collect::<Result<_>>()?;
        let inv = Tensor::from_vec(inv, t.len(), v.device())?.to_dtype(v.dtype())?;
        Ok(v.broadcast_mul(&per_item(&inv, 3)?)?)
    }
}

impl ScoreModel for ScoreNet {
    fn score(&self, x_t: &Tensor, cond: &Tensor, t: &[f64]) -> Result<Tensor> {
        let v = self.raw_output(x_t, cond, t, None)?;
        self.scaled(v, t)
    }

    fn score_train(&self, x_t: &Tensor, cond: &Tensor, t: &[f64], rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let v = self.raw_output(x_t, cond, t, Some(rng))?;
        self.scaled(v, t)
    }
}

/// Randomly initialized parameters for `cfg` in single precision.
pub fn build_unet(cfg: &UNetConfig, seed: u64) -> Result<ScoreNetParams> {
    build_unet_with_dtype(cfg, seed, DType::F32)
}

pub fn build_unet_with_dtype(cfg: &UNetConfig, seed: u64, dtype: DType) -> Result<ScoreNetParams> {
    cfg.validate()?;
    let src = ParamSource::fresh(dtype, seed);
    // The schedule does not influence parameter shapes.
    ScoreNet::new(cfg, &NoiseSchedule::default(), &src, dtype)?;
    ScoreNetParams::from_vars(src.into_vars()?)
}

/// One score evaluation with the live parameters on a single `(h, w)` pair.
pub fn score_forward(
    params: &ScoreNetParams,
    pet_t: &Tensor,
    mri: &Tensor,
    t: f64,
    cfg: &UNetConfig,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let net = ScoreNet::from_params(cfg, schedule, params, Weights::Live)?;
    let out = net.score(&pet_t.unsqueeze(0)?, &mri.unsqueeze(0)?, &[t])?;
    Ok(out.squeeze(0)?)
}
