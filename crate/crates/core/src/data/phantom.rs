//! Deterministic paired phantoms.
//!
//! Each phantom draws a shared anatomy of 2-4 nested ellipses. The MRI renders
//! tissue classes with a T1-like contrast and a smooth multiplicative bias
//! field. The PET renders the same classes with a metabolic contrast,
//! optionally a focal hypointense lesion, and a Gaussian blur restricted to
//! the head support so both modalities share an identical foreground.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::PairedSlice;
use crate::rng::{stream, Purpose};
use crate::{Error, Result};

/// Base intensities per nesting depth (depth 1 is the outermost ellipse).
const MRI_LEVELS: [f64; 4] = [0.45, 0.75, 0.22, 0.58];
const PET_LEVELS: [f64; 4] = [0.75, 0.45, 0.20, 0.90];
const LEVEL_JITTER: f64 = 0.03;

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// A phantom together with the ground truth used to test the generator.
#[derive(Debug, Clone)]
pub struct PhantomDetail {
    pub slice: PairedSlice,
    /// Nesting depth per pixel; zero is background.
    pub labels: Array2<u8>,
    pub lesion: Option<Array2<bool>>,
    /// PET rendered from the same draws without the lesion.
    pub pet_without_lesion: Array2<f32>,
}

fn check_size(size: usize) -> Result<()> {
    if size < 16 || size % 4 != 0 {
        return Err(Error::Config(format!(
            "phantom size must be >= 16 and divisible by 4, got {size}"
        )));
    }
    Ok(())
}

/// `count` phantoms of `size x size`; phantom `i` depends only on `(seed, i)`.
pub fn gen_phantom(count: usize, size: usize, seed: u64) -> Result<Vec<PairedSlice>> {
    check_size(size)?;
    if count == 0 {
        return Err(Error::Config("phantom count must be at least 1".into()));
    }
    (0..count)
        .map(|i| render_phantom(i, size, seed).map(|d| d.slice))
        .collect()
}

pub fn render_phantom(index: usize, size: usize, seed: u64) -> Result<PhantomDetail> {
    check_size(size)?;
    let mut rng = stream(seed, Purpose::Phantom, index as u64);
    let s = size as f64;
    let depth = rng.random_range(2..=4usize);

    let mut ellipses = Vec::with_capacity(depth);
    let mut parent = Ellipse {
        cy: s / 2.0 + rng.random_range(-0.04..0.04) * s,
        cx: s / 2.0 + rng.random_range(-0.04..0.04) * s,
        ry: rng.random_range(0.36..0.44) * s,
        rx: rng.random_range(0.30..0.40) * s,
        angle: rng.random_range(-0.5..0.5),
    };
    ellipses.push(parent);
    for _ in 1..depth {
        let child = Ellipse {
            cy: parent.cy + rng.random_range(-0.2..0.2) * parent.ry,
            cx: parent.cx + rng.random_range(-0.2..0.2) * parent.rx,
            ry: rng.random_range(0.45..0.72) * parent.ry,
            rx: rng.random_range(0.45..0.72) * parent.rx,
            angle: rng.random_range(-1.5..1.5),
        };
        ellipses.push(child);
        parent = child;
    }

    let labels = Array2::from_shape_fn((size, size), |(y, x)| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        ellipses
            .iter()
            .take_while(|e| e.contains(py, px))
            .count() as u8
    });

    let jitter = |rng: &mut ChaCha8Rng, base: &[f64; 4]| -> [f64; 4] {
        let mut out = *base;
        for v in &mut out {
            *v += rng.random_range(-LEVEL_JITTER..LEVEL_JITTER);
        }
        out
    };
    let mri_levels = jitter(&mut rng, &MRI_LEVELS);
    let pet_levels = jitter(&mut rng, &PET_LEVELS);

    // Smooth bias field in roughly [0.9, 1.1].
    let (gy, gx, q) = (
        rng.random_range(-0.06..0.06),
        rng.random_range(-0.06..0.06),
        rng.random_range(-0.04..0.04),
    );
    let mri = Array2::from_shape_fn((size, size), |(y, x)| {
        let l = labels[[y, x]] as usize;
        if l == 0 {
            return 0.0f32;
        }
        let (u, v) = (2.0 * (y as f64 + 0.5) / s - 1.0, 2.0 * (x as f64 + 0.5) / s - 1.0);
        let bias = 1.0 + gy * u + gx * v + q * (u * u + v * v);
        (mri_levels[l - 1] * bias).clamp(0.0, 1.0) as f32
    });

    let support = labels.mapv(|l| l > 0);
    let pet_raw = labels.mapv(|l| if l == 0 { 0.0 } else { pet_levels[l as usize - 1] });

    let lesion = if rng.random_bool(0.5) {
        let inside: Vec<(usize, usize)> = labels
            .indexed_iter()
            .filter(|(_, l)| **l >= 1)
            .map(|(p, _)| p)
            .collect();
        let radius = rng.random_range(0.06..0.10) * s;
        // Keep the lesion clear of the head boundary where possible.
        let outer = ellipses[0];
        let shrunk = Ellipse {
            rx: (outer.rx - radius).max(1.0),
            ry: (outer.ry - radius).max(1.0),
            ..outer
        };
        let candidates: Vec<(usize, usize)> = inside
            .iter()
            .copied()
            .filter(|(y, x)| shrunk.contains(*y as f64 + 0.5, *x as f64 + 0.5))
            .collect();
        let pool = if candidates.is_empty() { &inside } else { &candidates };
        let (cy, cx) = pool[rng.random_range(0..pool.len())];
        let factor = rng.random_range(0.45..0.6);
        let mask = Array2::from_shape_fn((size, size), |(y, x)| {
            let d2 = (y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2);
            support[[y, x]] && d2 <= radius * radius
        });
        Some((mask, factor))
    } else {
        None
    };

    let sigma = (s / 40.0).max(0.8);
    let pet_without_lesion = masked_blur(&pet_raw, &support, sigma);
    let pet = match &lesion {
        Some((mask, factor)) => {
            let darkened = Array2::from_shape_fn((size, size), |p| {
                if mask[p] {
                    pet_raw[p] * factor
                } else {
                    pet_raw[p]
                }
            });
            masked_blur(&darkened, &support, sigma)
        }
        None => pet_without_lesion.clone(),
    };

    Ok(PhantomDetail {
        slice: PairedSlice::new(format!("ph{seed}_{index:05}"), mri, pet)?,
        labels,
        lesion: lesion.map(|(m, _)| m),
        pet_without_lesion,
    })
}

/// Normalized convolution with a Gaussian, restricted to `support`.
fn masked_blur(image: &Array2<f64>, support: &Array2<bool>, sigma: f64) -> Array2<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let (h, w) = image.dim();
    let weight = support.mapv(|b| if b { 1.0 } else { 0.0 });
    let masked = image * &weight;
    let separable = |a: &Array2<f64>| -> Array2<f64> {
        let rows = Array2::from_shape_fn((h, w), |(y, x)| {
            kernel
                .iter()
                .enumerate()
                .filter_map(|(k, kv)| {
                    let xx = x as isize + k as isize - radius;
                    (0..w as isize).contains(&xx).then(|| kv * a[[y, xx as usize]])
                })
                .sum::<f64>()
        });
        Array2::from_shape_fn((h, w), |(y, x)| {
            kernel
                .iter()
                .enumerate()
                .filter_map(|(k, kv)| {
                    let yy = y as isize + k as isize - radius;
                    (0..h as isize).contains(&yy).then(|| kv * rows[[yy as usize, x]])
                })
                .sum::<f64>()
        })
    };
    let num = separable(&masked);
    let den = separable(&weight);
    Array2::from_shape_fn((h, w), |p| {
        if support[p] && den[p] > 0.0 {
            (num[p] / den[p]).clamp(0.0, 1.0) as f32
        } else {
            0.0
        }
    })
}
