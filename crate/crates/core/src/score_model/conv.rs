//! 2D convolution as `im2col` followed by a single matmul over the whole batch.
//!
//! candle's CPU convolution backward goes through a naive transposed
//! convolution; unfolding the input with a custom op whose backward is the
//! matching `col2im` keeps the whole gradient on the gemm path.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use super::params::{Init, ParamSource};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Window {
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Window {
    fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// `(b, c, h, w)` -> `(c * k * k, b * ho * wo)`.
    fn unfold<T: WithDType>(&self, x: &[T], (b, c, h, w): (usize, usize, usize, usize)) -> Vec<T> {
        let k = self.kernel;
        let (ho, wo) = (self.out_len(h), self.out_len(w));
        let cols = ho * wo;
        let stride = b * cols;
        let mut out = vec![T::zero(); c * k * k * stride];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &x[(bi * c + ci) * h * w..][..h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        let dst = &mut out[row * stride + bi * cols..][..cols];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &plane[iy as usize * w..][..w];
                            let dst = &mut dst[oy * wo..][..wo];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`Window::unfold`]: scatters-adds columns back onto `(b, c, h, w)`.
    fn fold<T: WithDType>(&self, col: &[T], (b, c, h, w): (usize, usize, usize, usize)) -> Vec<T> {
        let k = self.kernel;
        let (ho, wo) = (self.out_len(h), self.out_len(w));
        let cols = ho * wo;
        let stride = b * cols;
        let mut out = vec![T::zero(); b * c * h * w];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &mut out[(bi * c + ci) * h * w..][..h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        let src = &col[row * stride + bi * cols..][..cols];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst = &mut plane[iy as usize * w..][..w];
                            let src = &src[oy * wo..][..wo];
                            for (ox, s) in src.iter().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[ix as usize] += *s;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

struct Im2Col(Window);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        let dims = (b, c, h, w);
        let k = self.0.kernel;
        let shape = Shape::from((c * k * k, b * self.0.out_len(h) * self.0.out_len(w)));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.0.unfold(contiguous_slice(v, layout)?, dims)),
            CpuStorage::F64(v) => CpuStorage::F64(self.0.unfold(contiguous_slice(v, layout)?, dims)),
            other => candle_core::bail!("im2col: unsupported dtype {:?}", candle_core::backend::BackendStorage::dtype(other)),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (batch, _, h, w) = arg.dims4()?;
        let grad = grad_res.contiguous()?.apply_op1(Col2Im {
            window: self.0,
            batch,
            channels: arg.dim(1)?,
            h,
            w,
        })?;
        Ok(Some(grad))
    }
}

struct Col2Im {
    window: Window,
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = (self.batch, self.channels, self.h, self.w);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.window.fold(contiguous_slice(v, layout)?, dims)),
            CpuStorage::F64(v) => CpuStorage::F64(self.window.fold(contiguous_slice(v, layout)?, dims)),
            other => candle_core::bail!("col2im: unsupported dtype {:?}", candle_core::backend::BackendStorage::dtype(other)),
        };
        Ok((out, Shape::from(dims)))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col(self.window))?))
    }
}

/// Square-kernel 2D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    window: Window,
    in_channels: usize,
    out_channels: usize,
}

impl Conv2d {
    pub fn new(
        src: &ParamSource,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = src.get(
            &[out_channels, in_channels, kernel, kernel],
            "weight",
            Init::Uniform(bound),
        )?;
        let bias = src.get(&[out_channels], "bias", Init::Uniform(bound))?;
        Ok(Self {
            weight,
            bias,
            window: Window {
                kernel,
                stride,
                pad: kernel / 2,
            },
            in_channels,
            out_channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(crate::Error::Dimension(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (ho, wo) = (self.window.out_len(h), self.window.out_len(w));
        let k = self.window.kernel;
        // Columns are (c * k * k, b * ho * wo), so the whole batch is one gemm.
        let col = if k == 1 && self.window.stride == 1 {
            x.transpose(0, 1)?.contiguous()?.reshape((c, b * h * w))?
        } else {
            x.contiguous()?.apply_op1(Im2Col(self.window))?
        };
        let y = self
            .weight
            .reshape((self.out_channels, c * k * k))?
            .matmul(&col)?
            .broadcast_add(&self.bias.reshape((self.out_channels, 1))?)?;
        Ok(y
            .reshape((self.out_channels, b, ho, wo))?
            .transpose(0, 1)?
            .contiguous()?)
    }
}

/// Unfolds `(b, c, h, w)` into `(c * k * k, b * ho * wo)` columns.
pub fn im2col(x: &Tensor, kernel: usize, stride: usize, pad: usize) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Im2Col(Window { kernel, stride, pad }))?)
}
