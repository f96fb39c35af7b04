//! Variance-exploding SDE: geometric noise schedule, perturbation kernel and
//! the kernel score used as the regression target.
//!
//! The drift is identically zero and the kernel standard deviation is
//! `sigma(t) = sigma_min * (sigma_max / sigma_min)^t` for `t` in `[0, 1]`.
//! The discrete levels `sigma_1 < ... < sigma_N` sample the same curve at
//! `t = (i - 1) / (N - 1)`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub num_steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.01,
            sigma_max: 50.0,
            num_steps: 1000,
        }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, num_steps: usize) -> Result<Self> {
        let schedule = Self {
            sigma_min,
            sigma_max,
            num_steps,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min.is_finite() && self.sigma_max.is_finite()) || self.sigma_min <= 0.0 {
            return Err(Error::Config(format!(
                "sigma_min must be positive and finite, got {}",
                self.sigma_min
            )));
        }
        if self.sigma_min >= self.sigma_max {
            return Err(Error::Config(format!(
                "sigma_min ({}) must be below sigma_max ({})",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.num_steps < 2 {
            return Err(Error::Config(format!(
                "num_steps must be at least 2, got {}",
                self.num_steps
            )));
        }
        Ok(())
    }

    /// Kernel standard deviation at time `t`.
    pub fn sigma_at(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        // Written as a product of powers so both endpoints are exact.
        Ok(self.sigma_min.powf(1.0 - t) * self.sigma_max.powf(t))
    }

    /// The geometric sequence `sigma_1 .. sigma_N` (zero-based in the returned vector).
    pub fn discrete_sigmas(&self) -> Result<Vec<f64>> {
        self.validate()?;
        (1..=self.num_steps)
            .map(|i| self.sigma_at(self.level_time(i)))
            .collect()
    }

    /// Time associated with the one-based level `i`, `(i - 1) / (N - 1)`.
    pub fn level_time(&self, level: usize) -> f64 {
        (level as f64 - 1.0) / (self.num_steps as f64 - 1.0)
    }

    /// Noise level for the one-based index `level`, with `sigma_0 = 0`.
    pub fn level_sigma(&self, level: usize) -> Result<f64> {
        match level {
            0 => Ok(0.0),
            l if l <= self.num_steps => self.sigma_at(self.level_time(l)),
            l => Err(Error::Domain(format!(
                "noise level {l} outside 0..={}",
                self.num_steps
            ))),
        }
    }

    /// Diffusion coefficient `g(t) = sigma(t) * sqrt(2 ln(sigma_max / sigma_min))`.
    pub fn diffusion(&self, t: f64) -> Result<f64> {
        Ok(self.sigma_at(t)? * (2.0 * (self.sigma_max / self.sigma_min).ln()).sqrt())
    }
}

pub(crate) fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!("t must lie in [0, 1], got {t}")))
    }
}

pub(crate) fn ensure_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Forward diffusion `x0 + sigma(t) * z`.
pub fn perturb(x0: &Tensor, t: f64, z: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    ensure_same_shape(x0, z, "perturb")?;
    let sigma = schedule.sigma_at(t)?;
    Ok((x0 + (z * sigma)?)?)
}

/// Forward diffusion with one noise level per leading-axis item.
///
/// `x0` and `z` are `(batch, ...)`; `sigmas` is `(batch,)` in the same dtype.
pub fn perturb_batch(x0: &Tensor, sigmas: &Tensor, z: &Tensor) -> Result<Tensor> {
    ensure_same_shape(x0, z, "perturb_batch")?;
    let scale = per_item(sigmas, x0.rank())?;
    Ok((x0 + z.broadcast_mul(&scale)?)?)
}

/// Score of the perturbation kernel, `-(x_t - x0) / sigma(t)^2`.
pub fn kernel_score(
    x_t: &Tensor,
    x0: &Tensor,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    ensure_same_shape(x_t, x0, "kernel_score")?;
    let sigma = schedule.sigma_at(t)?;
    Ok(((x_t - x0)? * (-1.0 / (sigma * sigma)))?)
}

/// Reshapes a `(batch,)` vector so it broadcasts against a rank-`rank` tensor.
pub(crate) fn per_item(values: &Tensor, rank: usize) -> Result<Tensor> {
    let b = values.dims1()?;
    let mut dims = vec![1usize; rank];
    dims[0] = b;
    Ok(values.reshape(dims)?)
}
