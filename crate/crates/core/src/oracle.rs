//! Closed-form scores of Gaussian data perturbed by isotropic noise.
//!
//! If the clean data is `N(mu, Sigma)` then the perturbed marginal at noise
//! level `sigma` is `N(mu, Sigma + sigma^2 I)` and its score is
//! `-(Sigma + sigma^2 I)^{-1} (x - mu)`. For a joint `(x, y)` where only the
//! `x` block is perturbed, the noise covariance is added to that block only.

use candle_core::{DType, Tensor};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::score_model::ScoreModel;
use crate::sde::{ensure_same_shape, NoiseSchedule};
use crate::{Error, Result};

/// A Gaussian `N(mean, cov)` with a symmetric positive definite covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::Dimension("gaussian mean is empty".into()));
        }
        if cov.shape() != (d, d) {
            return Err(Error::Dimension(format!(
                "covariance is {:?}, mean has length {d}",
                cov.shape()
            )));
        }
        if (&cov - cov.transpose()).abs().max() > 1e-12 * (1.0 + cov.abs().max()) {
            return Err(Error::Domain("covariance is not symmetric".into()));
        }
        if Cholesky::new(cov.clone()).is_none() {
            return Err(Error::Domain("covariance is not positive definite".into()));
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov,
        })
    }

    /// `N(mean, var)` in one dimension.
    pub fn scalar(mean: f64, var: f64) -> Result<Self> {
        Self::new(vec![mean], DMatrix::from_element(1, 1, var))
    }

    /// Standard bivariate `(x, y)` with unit variances and correlation `rho`.
    pub fn bivariate(mean: [f64; 2], var: [f64; 2], rho: f64) -> Result<Self> {
        let c = rho * (var[0] * var[1]).sqrt();
        Self::new(mean.to_vec(), DMatrix::from_row_slice(2, 2, &[var[0], c, c, var[1]]))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Precision of `Sigma + sigma^2 E`, where `E` is the identity on the first
    /// `noisy` coordinates and zero elsewhere.
    fn perturbed_precision(&self, noisy: usize, sigma: f64) -> Result<DMatrix<f64>> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Domain(format!("noise level must be non-negative, got {sigma}")));
        }
        let mut c = self.cov.clone();
        for k in 0..noisy {
            c[(k, k)] += sigma * sigma;
        }
        let chol: Cholesky<f64, Dyn> = Cholesky::new(c)
            .ok_or_else(|| Error::Domain("perturbed covariance is not positive definite".into()))?;
        Ok(chol.inverse())
    }

    /// `(P_xx, P_xy)` blocks of the perturbed joint precision for a split
    /// after `dx` coordinates.
    pub fn joint_precision_blocks(&self, dx: usize, sigma: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if dx == 0 || dx >= self.dim() {
            return Err(Error::Dimension(format!(
                "x block size {dx} must lie in 1..{}",
                self.dim()
            )));
        }
        let p = self.perturbed_precision(dx, sigma)?;
        let dy = self.dim() - dx;
        Ok((p.view((0, 0), (dx, dx)).into_owned(), p.view((0, dx), (dx, dy)).into_owned()))
    }
}

/// `grad_x log p_sigma(x)` with every coordinate perturbed.
pub fn marginal_score(spec: &GaussianSpec, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if x.len() != spec.dim() {
        return Err(Error::Dimension(format!("x has length {}, expected {}", x.len(), spec.dim())));
    }
    let p = spec.perturbed_precision(spec.dim(), sigma)?;
    let r = DVector::from_column_slice(x) - &spec.mean;
    Ok((-(p * r)).as_slice().to_vec())
}

/// `x` block of `grad log p_sigma(x, y)` where only `x` is perturbed. The
/// first `x.len()` coordinates of `spec` belong to `x`.
pub fn joint_score_x(spec: &GaussianSpec, x: &[f64], y: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if x.len() + y.len() != spec.dim() {
        return Err(Error::Dimension(format!(
            "x and y lengths {} + {} do not match dimension {}",
            x.len(),
            y.len(),
            spec.dim()
        )));
    }
    let (pxx, pxy) = spec.joint_precision_blocks(x.len(), sigma)?;
    let dx = x.len();
    let rx = DVector::from_column_slice(x) - spec.mean.rows(0, dx);
    let ry = DVector::from_column_slice(y) - spec.mean.rows(dx, y.len());
    Ok((-(pxx * rx + pxy * ry)).as_slice().to_vec())
}

/// `grad_x log p_sigma(x | y)` through the conditional Gaussian.
pub fn conditional_score(spec: &GaussianSpec, x: &[f64], y: &[f64], sigma: f64) -> Result<Vec<f64>> {
    let dx = x.len();
    let dy = y.len();
    if dx == 0 || dy == 0 || dx + dy != spec.dim() {
        return Err(Error::Dimension("conditional split does not match dimension".into()));
    }
    let cxx = spec.cov.view((0, 0), (dx, dx));
    let cxy = spec.cov.view((0, dx), (dx, dy));
    let cyy = spec.cov.view((dx, dx), (dy, dy)).into_owned();
    let cyy_inv = Cholesky::new(cyy)
        .ok_or_else(|| Error::Domain("y covariance is not positive definite".into()))?
        .inverse();
    let gain = cxy * &cyy_inv;
    let ry = DVector::from_column_slice(y) - spec.mean.rows(dx, dy);
    let mean_c = spec.mean.rows(0, dx) + &gain * ry;
    let mut cov_c = cxx - &gain * cxy.transpose();
    for k in 0..dx {
        cov_c[(k, k)] += sigma * sigma;
    }
    let prec = Cholesky::new(cov_c)
        .ok_or_else(|| Error::Domain("conditional covariance is not positive definite".into()))?
        .inverse();
    Ok((-(prec * (DVector::from_column_slice(x) - mean_c))).as_slice().to_vec())
}

fn map_pixels(x: &Tensor, t: &[f64], schedule: &NoiseSchedule, mut f: impl FnMut(f64, f64, usize) -> f64) -> Result<Tensor> {
    let (b, h, w) = x.dims3()?;
    if t.len() != b {
        return Err(Error::Dimension(format!("{} times for batch of {b}", t.len())));
    }
    let values: Vec<f64> = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let per = h * w;
    let mut out = Vec::with_capacity(values.len());
    for (k, v) in values.iter().enumerate() {
        let item = k / per;
        let sigma = schedule.sigma_at(t[item])?;
        out.push(f(*v, sigma, k));
    }
    Ok(Tensor::from_vec(out, (b, h, w), x.device())?.to_dtype(x.dtype())?)
}

/// Score of i.i.d. `N(mean, var)` pixels, ignoring the condition.
#[derive(Debug, Clone, Copy)]
pub struct PixelGaussianScore {
    pub mean: f64,
    pub var: f64,
    pub schedule: NoiseSchedule,
}

impl PixelGaussianScore {
    pub fn new(mean: f64, var: f64, schedule: NoiseSchedule) -> Result<Self> {
        GaussianSpec::scalar(mean, var)?;
        schedule.validate()?;
        Ok(Self { mean, var, schedule })
    }
}

impl ScoreModel for PixelGaussianScore {
    fn score(&self, x_t: &Tensor, cond: &Tensor, t: &[f64]) -> Result<Tensor> {
        ensure_same_shape(x_t, cond, "oracle inputs")?;
        map_pixels(x_t, t, &self.schedule, |x, sigma, _| {
            -(x - self.mean) / (self.var + sigma * sigma)
        })
    }
}

/// Joint score of pixelwise bivariate `(pet, mri)` pairs; only PET is perturbed.
#[derive(Debug, Clone)]
pub struct PixelJointGaussianScore {
    spec: GaussianSpec,
    schedule: NoiseSchedule,
}

impl PixelJointGaussianScore {
    /// `spec` must be two-dimensional, ordered `(pet, mri)`.
    pub fn new(spec: GaussianSpec, schedule: NoiseSchedule) -> Result<Self> {
        if spec.dim() != 2 {
            return Err(Error::Dimension(format!("pixel joint oracle needs a 2-d Gaussian, got {}", spec.dim())));
        }
        schedule.validate()?;
        Ok(Self { spec, schedule })
    }
}

impl ScoreModel for PixelJointGaussianScore {
    fn score(&self, x_t: &Tensor, cond: &Tensor, t: &[f64]) -> Result<Tensor> {
        ensure_same_shape(x_t, cond, "oracle inputs")?;
        let ys: Vec<f64> = cond.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let (mx, my) = (self.spec.mean[0], self.spec.mean[1]);
        let mut cache: Option<(f64, f64, f64)> = None;
        let mut failure = None;
        let out = map_pixels(x_t, t, &self.schedule, |x, sigma, k| {
            let (pxx, pxy) = match cache {
                Some((s, a, b)) if s == sigma => (a, b),
                _ => match self.spec.joint_precision_blocks(1, sigma) {
                    Ok((a, b)) => {
                        cache = Some((sigma, a[(0, 0)], b[(0, 0)]));
                        (a[(0, 0)], b[(0, 0)])
                    }
                    Err(e) => {
                        failure.get_or_insert(e);
                        (f64::NAN, f64::NAN)
                    }
                },
            };
            -(pxx * (x - mx) + pxy * (ys[k] - my))
        })?;
        match failure {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, stream, Purpose};
    use candle_core::Device;

    fn log_density(spec: &GaussianSpec, noisy: usize, sigma: f64, v: &[f64]) -> f64 {
        // Independent route: explicit inverse via LU and the quadratic form.
        let mut c = spec.cov().clone();
        for k in 0..noisy {
            c[(k, k)] += sigma * sigma;
        }
        let inv = c.clone().try_inverse().unwrap();
        let r = DVector::from_column_slice(v) - spec.mean();
        -0.5 * (r.transpose() * inv * &r)[(0, 0)] - 0.5 * c.determinant().ln()
    }

    fn random_spd(d: usize, seed: u64) -> GaussianSpec {
        let mut rng = stream(seed, Purpose::Check, 0);
        let a = DMatrix::from_vec(d, d, normal_vec(&mut rng, d * d));
        let cov = &a * a.transpose() + DMatrix::identity(d, d) * 0.5;
        GaussianSpec::new(normal_vec(&mut rng, d), cov).unwrap()
    }

    #[test]
    fn marginal_score_matches_finite_differences() {
        let spec = random_spd(3, 1);
        let mut rng = stream(2, Purpose::Check, 0);
        let h = 1e-5;
        for k in 0..100 {
            let sigma = 0.05 + 0.1 * (k % 10) as f64;
            let x = normal_vec(&mut rng, 3);
            let s = marginal_score(&spec, &x, sigma).unwrap();
            for j in 0..3 {
                let mut up = x.clone();
                let mut dn = x.clone();
                up[j] += h;
                dn[j] -= h;
                let fd = (log_density(&spec, 3, sigma, &up) - log_density(&spec, 3, sigma, &dn)) / (2.0 * h);
                assert!((fd - s[j]).abs() < 1e-5, "fd {fd} vs {}", s[j]);
            }
        }
    }

    #[test]
    fn joint_score_matches_finite_differences() {
        let spec = random_spd(4, 3);
        let mut rng = stream(4, Purpose::Check, 0);
        let h = 1e-5;
        for k in 0..100 {
            let sigma = 0.02 + 0.2 * (k % 7) as f64;
            let v = normal_vec(&mut rng, 4);
            let s = joint_score_x(&spec, &v[..2], &v[2..], sigma).unwrap();
            for j in 0..2 {
                let mut up = v.clone();
                let mut dn = v.clone();
                up[j] += h;
                dn[j] -= h;
                let fd = (log_density(&spec, 2, sigma, &up) - log_density(&spec, 2, sigma, &dn)) / (2.0 * h);
                assert!((fd - s[j]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn joint_score_equals_conditional_score() {
        let spec = random_spd(3, 5);
        let mut rng = stream(6, Purpose::Check, 0);
        for sigma in [0.0, 0.1, 1.0, 10.0] {
            let v = normal_vec(&mut rng, 3);
            let a = joint_score_x(&spec, &v[..1], &v[1..], sigma).unwrap();
            let b = conditional_score(&spec, &v[..1], &v[1..], sigma).unwrap();
            assert!((a[0] - b[0]).abs() < 1e-9 * (1.0 + a[0].abs()));
        }
    }

    #[test]
    fn independent_joint_reduces_to_marginal() {
        let spec = GaussianSpec::bivariate([0.3, -0.2], [0.5, 2.0], 0.0).unwrap();
        let marg = GaussianSpec::scalar(0.3, 0.5).unwrap();
        for (x, y) in [(0.0, 4.0), (1.5, -3.0), (-2.0, 0.0)] {
            let j = joint_score_x(&spec, &[x], &[y], 0.7).unwrap()[0];
            let m = marginal_score(&marg, &[x], 0.7).unwrap()[0];
            assert!((j - m).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_covariances() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.2, 1.0]);
        assert!(GaussianSpec::new(vec![0.0, 0.0], asym).is_err());
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(GaussianSpec::new(vec![0.0, 0.0], singular).is_err());
        assert!(GaussianSpec::new(vec![0.0], DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn pixel_oracles_agree_with_vector_formulas() {
        let schedule = NoiseSchedule::new(0.01, 1.0, 10).unwrap();
        let spec = GaussianSpec::bivariate([0.5, 0.4], [0.04, 0.09], 0.6).unwrap();
        let oracle = PixelJointGaussianScore::new(spec.clone(), schedule).unwrap();
        let x = Tensor::from_vec(vec![0.1, 0.9, 0.4, 0.6, 0.2, 0.3, 0.7, 0.8], (2, 2, 2), &Device::Cpu).unwrap();
        let y = (x.ones_like().unwrap() - &x).unwrap();
        let t = [0.3, 0.9];
        let s = oracle.score(&x, &y, &t).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let xs = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for k in 0..8 {
            let sigma = schedule.sigma_at(t[k / 4]).unwrap();
            let e = joint_score_x(&spec, &[xs[k]], &[1.0 - xs[k]], sigma).unwrap()[0];
            assert!((s[k] - e).abs() < 1e-12);
        }
        let marg = PixelGaussianScore::new(0.5, 0.04, schedule).unwrap();
        let s = marg.score(&x, &y, &t).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for k in 0..8 {
            let sigma = schedule.sigma_at(t[k / 4]).unwrap();
            assert!((s[k] + (xs[k] - 0.5) / (0.04 + sigma * sigma)).abs() < 1e-12);
        }
    }
}
