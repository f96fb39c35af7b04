//! PSNR, SSIM and error maps between synthesized and reference images.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize, Serializer};

use crate::{Error, Result};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_pair(a: &ArrayView2<f32>, b: &ArrayView2<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "image shapes {:?} and {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    if a.is_empty() {
        return Err(Error::Dimension("images are empty".into()));
    }
    Ok(())
}

fn check_range(data_range: f64) -> Result<()> {
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::Domain(format!("data_range must be positive, got {data_range}")));
    }
    Ok(())
}

pub fn mse(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Result<f64> {
    check_pair(&a, &b)?;
    let mut total = 0.0;
    Zip::from(&a).and(&b).for_each(|&x, &y| {
        let d = x as f64 - y as f64;
        total += d * d;
    });
    Ok(total / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB. Identical images give `f64::INFINITY`.
pub fn psnr(a: ArrayView2<f32>, b: ArrayView2<f32>, data_range: f64) -> Result<f64> {
    check_range(data_range)?;
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (k, tap) in taps.iter_mut().enumerate() {
        let d = k as f64 - c;
        *tap = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.map(|t| t / sum)
}

/// Separable valid-mode filtering with the normalized Gaussian window.
fn filter_valid(img: &Array2<f64>, taps: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = img.dim();
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            rows[(i, j)] = (0..SSIM_WINDOW).map(|k| taps[k] * img[(i, j + k)]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            out[(i, j)] = (0..SSIM_WINDOW).map(|k| taps[k] * rows[(i + k, j)]).sum();
        }
    }
    out
}

/// Mean structural similarity over every full 11x11 Gaussian window.
pub fn ssim(a: ArrayView2<f32>, b: ArrayView2<f32>, data_range: f64) -> Result<f64> {
    check_range(data_range)?;
    check_pair(&a, &b)?;
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Domain(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let x = a.mapv(f64::from);
    let y = b.mapv(f64::from);
    let taps = gaussian_taps();
    let mu_x = filter_valid(&x, &taps);
    let mu_y = filter_valid(&y, &taps);
    let xx = filter_valid(&(&x * &x), &taps);
    let yy = filter_valid(&(&y * &y), &taps);
    let xy = filter_valid(&(&x * &y), &taps);
    let c1 = (K1 * data_range).powi(2);
    let c2 = (K2 * data_range).powi(2);
    let mut total = 0.0;
    Zip::from(&mu_x)
        .and(&mu_y)
        .and(&xx)
        .and(&yy)
        .and(&xy)
        .for_each(|&mx, &my, &sxx, &syy, &sxy| {
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        });
    Ok((total / mu_x.len() as f64).clamp(-1.0, 1.0))
}

/// Elementwise `a - b`, or `|a - b|` when `absolute` is set.
pub fn error_map(a: ArrayView2<f32>, b: ArrayView2<f32>, absolute: bool) -> Result<Array2<f64>> {
    check_pair(&a, &b)?;
    let mut out = Zip::from(&a).and(&b).map_collect(|&x, &y| x as f64 - y as f64);
    if absolute {
        out.mapv_inplace(f64::abs);
    }
    Ok(out)
}

fn finite_or_inf<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_none()
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

fn parse_inf<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
        Null(()),
    }
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
        Repr::Text(t) => Err(serde::de::Error::custom(format!("invalid number `{t}`"))),
        Repr::Null(()) => Ok(f64::NAN),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    #[serde(serialize_with = "finite_or_inf", deserialize_with = "parse_inf")]
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(serialize_with = "finite_or_inf", deserialize_with = "parse_inf")]
    pub psnr_mean: f64,
    #[serde(serialize_with = "finite_or_inf", deserialize_with = "parse_inf")]
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_sample: Vec<SampleMetrics>,
    pub aggregate: Aggregate,
    pub data_range: f64,
    /// Whatever produced the predictions, echoed verbatim.
    pub config: serde_json::Value,
}

/// Mean and sample standard deviation (zero for a single value). Infinite
/// PSNRs make the mean infinite; the spread is then zero if all are infinite
/// and infinite otherwise.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let infinite = values.iter().filter(|v| v.is_infinite()).count();
    if infinite > 0 {
        let spread = if infinite == n { 0.0 } else { f64::INFINITY };
        return (f64::INFINITY, spread);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn new(per_sample: Vec<SampleMetrics>, data_range: f64, config: serde_json::Value) -> Self {
        let psnrs: Vec<f64> = per_sample.iter().map(|s| s.psnr_db).collect();
        let ssims: Vec<f64> = per_sample.iter().map(|s| s.ssim).collect();
        let (psnr_mean, psnr_std) = mean_std(&psnrs);
        let (ssim_mean, ssim_std) = mean_std(&ssims);
        Self {
            aggregate: Aggregate {
                psnr_mean,
                psnr_std,
                ssim_mean,
                ssim_std,
                n: per_sample.len(),
            },
            per_sample,
            data_range,
            config,
        }
    }
}

/// Scores one prediction against its reference.
pub fn evaluate_pair(id: &str, pred: ArrayView2<f32>, reference: ArrayView2<f32>, data_range: f64) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        id: id.to_string(),
        psnr_db: psnr(pred, reference, data_range)?,
        ssim: ssim(pred, reference, data_range)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_phantom;
    use crate::rng::{normal_vec, stream, Purpose};

    fn noisy(base: &Array2<f32>, amp: f64, seed: u64) -> Array2<f32> {
        let mut rng = stream(seed, Purpose::Check, 0);
        let n = normal_vec(&mut rng, base.len());
        let mut out = base.clone();
        for (v, z) in out.iter_mut().zip(n) {
            *v += (amp * z) as f32;
        }
        out
    }

    /// Direct 2D window sum, independent of the separable filter.
    fn ssim_reference(a: &Array2<f32>, b: &Array2<f32>, range: f64) -> f64 {
        let (h, w) = a.dim();
        let mut win = [[0.0f64; 11]; 11];
        let mut sum = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / 4.5).exp();
                sum += *v;
            }
        }
        let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..=h - 11 {
            for j in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for u in 0..11 {
                    for v in 0..11 {
                        let g = win[u][v] / sum;
                        let x = a[(i + u, j + v)] as f64;
                        let y = b[(i + u, j + v)] as f64;
                        mx += g * x;
                        my += g * y;
                        sxx += g * x * x;
                        syy += g * y * y;
                        sxy += g * x * y;
                    }
                }
                let (vx, vy, cv) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cv + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_known_values() {
        let a = Array2::<f32>::zeros((4, 4));
        assert_eq!(psnr(a.view(), a.view(), 1.0).unwrap(), f64::INFINITY);
        let b = Array2::<f32>::from_elem((4, 4), 0.1);
        // MSE = 0.01 up to f32 rounding of 0.1.
        assert!((psnr(a.view(), b.view(), 1.0).unwrap() - 20.0).abs() < 1e-6);
    }

    #[test]
    fn psnr_matches_reference_and_is_symmetric() {
        let a = gen_phantom(1, 32, 3).unwrap()[0].pet.clone();
        let b = noisy(&a, 0.05, 1);
        let mut sq = 0.0f64;
        for (x, y) in a.iter().zip(b.iter()) {
            sq += (*x as f64 - *y as f64).powi(2);
        }
        let reference = 20.0 * 1.0f64.log10() - 10.0 * (sq / a.len() as f64).log10();
        let p = psnr(a.view(), b.view(), 1.0).unwrap();
        assert!((p - reference).abs() < 1e-9);
        assert_eq!(p, psnr(b.view(), a.view(), 1.0).unwrap());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let a = gen_phantom(1, 32, 5).unwrap()[0].pet.clone();
        let mut last = f64::INFINITY;
        for (k, amp) in [0.01, 0.03, 0.1, 0.3].iter().enumerate() {
            let p = psnr(a.view(), noisy(&a, *amp, k as u64).view(), 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_matches_direct_window_sum() {
        let a = gen_phantom(1, 32, 7).unwrap()[0].pet.clone();
        let b = noisy(&a, 0.08, 2);
        let s = ssim(a.view(), b.view(), 1.0).unwrap();
        assert!((s - ssim_reference(&a, &b, 1.0)).abs() < 1e-9);
        assert!((s - ssim(b.view(), a.view(), 1.0).unwrap()).abs() < 1e-15);
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn ssim_trivial_cases() {
        let a = gen_phantom(1, 32, 8).unwrap()[0].pet.clone();
        assert_eq!(ssim(a.view(), a.view(), 1.0).unwrap(), 1.0);
        let c = Array2::<f32>::from_elem((16, 16), 0.4);
        assert_eq!(ssim(c.view(), c.view(), 1.0).unwrap(), 1.0);
        let inverted = a.mapv(|v| 1.0 - v);
        assert!(ssim(a.view(), inverted.view(), 1.0).unwrap() < 0.3);
    }

    #[test]
    fn ssim_rejects_small_images_and_bad_range() {
        let a = Array2::<f32>::zeros((10, 32));
        assert!(matches!(ssim(a.view(), a.view(), 1.0), Err(Error::Domain(_))));
        let a = Array2::<f32>::zeros((16, 16));
        assert!(ssim(a.view(), a.view(), 0.0).is_err());
        let b = Array2::<f32>::zeros((16, 17));
        assert!(matches!(psnr(a.view(), b.view(), 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn error_map_cross_checks_mse() {
        let a = gen_phantom(1, 32, 9).unwrap()[0].pet.clone();
        let b = noisy(&a, 0.1, 3);
        let e = error_map(a.view(), b.view(), false).unwrap();
        let ms = e.mapv(|v| v * v).mean().unwrap();
        assert!((ms - mse(a.view(), b.view()).unwrap()).abs() < 1e-12);
        let abs = error_map(a.view(), b.view(), true).unwrap();
        assert!(abs.iter().zip(e.iter()).all(|(x, y)| *x == y.abs()));
        let shifted = a.mapv(|v| v - 0.5);
        let c = error_map(a.view(), shifted.view(), false).unwrap();
        assert!(c.iter().all(|v| (v - 0.5).abs() < 1e-6));
        assert!(error_map(a.view(), a.view(), false).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn report_serializes_infinity_as_string() {
        let per = vec![
            SampleMetrics { id: "a".into(), psnr_db: f64::INFINITY, ssim: 1.0 },
            SampleMetrics { id: "b".into(), psnr_db: f64::INFINITY, ssim: 1.0 },
        ];
        let report = MetricsReport::new(per, 1.0, serde_json::json!({"k": 1}));
        let text = serde_json::to_string(&report).unwrap();
        assert!(text.contains("\"psnr_db\":\"inf\""));
        assert!(text.contains("\"psnr_mean\":\"inf\""));
        let back: MetricsReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn report_aggregate_is_mean_of_entries() {
        let per: Vec<SampleMetrics> = (0..5)
            .map(|k| SampleMetrics { id: k.to_string(), psnr_db: 20.0 + k as f64, ssim: 0.5 + 0.1 * k as f64 })
            .collect();
        let report = MetricsReport::new(per, 1.0, serde_json::Value::Null);
        assert_eq!(report.aggregate.n, 5);
        assert!((report.aggregate.psnr_mean - 22.0).abs() < 1e-12);
        assert!((report.aggregate.ssim_mean - 0.7).abs() < 1e-12);
        assert!((report.aggregate.psnr_std - 2.5f64.sqrt()).abs() < 1e-12);
    }
}
