use candle_core::{DType, Tensor, D};
use candle_nn::Module;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::conv::Conv2d;
use super::params::{Init, ParamSource};
use crate::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(src: &ParamSource, input: usize, output: usize) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        Ok(Self {
            weight: src.get(&[output, input], "weight", Init::Uniform(bound))?,
            bias: src.get(&[output], "bias", Init::Uniform(bound))?,
        })
    }

    /// `(batch, input)` -> `(batch, output)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }

    /// Applies the layer over the channel axis of `(batch, channels, positions)`.
    pub fn forward_channels(&self, x: &Tensor) -> Result<Tensor> {
        let b = x.dim(0)?;
        let out = self.weight.dim(0)?;
        // A stride-0 batch axis trips candle's CPU batched matmul; materialize it.
        Ok(self
            .weight
            .broadcast_left(b)?
            .contiguous()?
            .matmul(x)?
            .broadcast_add(&self.bias.reshape((1, out, 1))?)?)
    }
}

pub fn group_norm(src: &ParamSource, groups: usize, channels: usize) -> Result<candle_nn::GroupNorm> {
    let weight = src.get(&[channels], "weight", Init::Const(1.0))?;
    let bias = src.get(&[channels], "bias", Init::Const(0.0))?;
    Ok(candle_nn::GroupNorm::new(weight, bias, channels, groups, 1e-5)?)
}

/// Inverted dropout driven by an explicit generator; identity when `rng` is `None`.
pub fn dropout(x: &Tensor, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    let rng = match rng {
        Some(rng) if rate > 0.0 => rng,
        _ => return Ok(x.clone()),
    };
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

/// Sinusoidal features of `log sigma`, `(batch,)` -> `(batch, dim)`.
pub fn noise_level_embedding(sigmas: &[f64], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut values = Vec::with_capacity(sigmas.len() * dim);
    for s in sigmas {
        let u = s.ln();
        // Frequencies span 10 down to 0.01 radians per unit of log sigma.
        let freqs = (0..half).map(|k| 10.0 * (1e-3f64).powf(k as f64 / (half.max(2) - 1) as f64));
        let args: Vec<f64> = freqs.map(|f| f * u).collect();
        values.extend(args.iter().map(|a| a.sin()));
        values.extend(args.iter().map(|a| a.cos()));
        values.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(values, (sigmas.len(), dim), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Residual block: GroupNorm, conv, time projection, GroupNorm, dropout, conv,
/// SiLU, then the (possibly projected) skip is added.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: candle_nn::GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: candle_nn::GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    dropout: f64,
}

impl ResBlock {
    pub fn new(
        src: &ParamSource,
        in_channels: usize,
        out_channels: usize,
        time_dim: usize,
        groups: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(Self {
            norm1: group_norm(&src.pp("norm1"), groups, in_channels)?,
            conv1: Conv2d::new(&src.pp("conv1"), in_channels, out_channels, 3, 1)?,
            time_proj: Linear::new(&src.pp("time_proj"), time_dim, out_channels)?,
            norm2: group_norm(&src.pp("norm2"), groups, out_channels)?,
            conv2: Conv2d::new(&src.pp("conv2"), out_channels, out_channels, 3, 1)?,
            skip: if in_channels != out_channels {
                Some(Conv2d::new(&src.pp("skip"), in_channels, out_channels, 1, 1)?)
            } else {
                None
            },
            dropout,
        })
    }

    /// `temb` is the already-activated time embedding, `(batch, time_dim)`.
    pub fn forward(&self, x: &Tensor, temb: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?)?;
        let t = self.time_proj.forward(temb)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = dropout(&self.norm2.forward(&h)?, self.dropout, rng)?;
        let h = self.conv2.forward(&h)?.silu()?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Single-head self-attention over spatial positions with a residual connection.
#[derive(Debug, Clone)]
pub struct AttnBlock {
    norm: candle_nn::GroupNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    channels: usize,
}

impl AttnBlock {
    pub fn new(src: &ParamSource, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: group_norm(&src.pp("norm"), groups, channels)?,
            query: Linear::new(&src.pp("query"), channels, channels)?,
            key: Linear::new(&src.pp("key"), channels, channels)?,
            value: Linear::new(&src.pp("value"), channels, channels)?,
            out: Linear::new(&src.pp("out"), channels, channels)?,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let flat = self.norm.forward(x)?.reshape((b, c, h * w))?;
        let q = self.query.forward_channels(&flat)?;
        let k = self.key.forward_channels(&flat)?;
        let v = self.value.forward_channels(&flat)?;
        let scale = 1.0 / (self.channels as f64).sqrt();
        // (b, positions, positions), softmax over keys.
        let logits = (q.t()?.matmul(&k)? * scale)?;
        let weights = candle_nn::ops::softmax(&logits, D::Minus1)?;
        let attended = v.matmul(&weights.t()?)?;
        let out = self.out.forward_channels(&attended)?.reshape((b, c, h, w))?;
        Ok((x + out)?)
    }
}

/// Nearest-neighbour 2x upsampling via broadcast, so the backward is a plain sum.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}
