//! Noise predictors `ε̂(x_t, t)` usable without a trained network.
//!
//! All denoisers work in model space, where pixel values `p ∈ [0, 1]` are
//! mapped to `2p - 1`. Parameters given in pixel space are converted on load.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::spectral::{self, Spectrum};
use crate::store;
use crate::tensor::Tensor;

pub trait Denoiser: Send + Sync {
    /// Predicted noise with the dims of `x_t`.
    fn predict_noise(&self, x_t: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor>;
}

/// Predicts zero noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Denoiser for Identity {
    fn predict_noise(&self, x_t: &Tensor, _t: usize, _schedule: &NoiseSchedule) -> Result<Tensor> {
        Tensor::zeros(x_t.dims().to_vec())
    }
}

/// Treats the high-pass residual of a circular Gaussian blur as the noise.
#[derive(Debug, Clone, Copy)]
pub struct Blur {
    pub sigma: f64,
}

impl Blur {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::config(format!("blur sigma must be positive, got {sigma}")));
        }
        Ok(Self { sigma })
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with periodic boundaries on an `[H, W, C]` tensor.
pub fn circular_blur(x: &Tensor, sigma: f64) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let src = x.to_f64();
    let mut rows = vec![0.0; src.len()];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let jj = (j as isize + k as isize - r).rem_euclid(w as isize) as usize;
                    acc += kv * src[(i * w + jj) * c + ch];
                }
                rows[(i * w + j) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let ii = (i as isize + k as isize - r).rem_euclid(h as isize) as usize;
                    acc += kv * rows[(ii * w + j) * c + ch];
                }
                out[(i * w + j) * c + ch] = acc;
            }
        }
    }
    Tensor::from_f64(x.dims().to_vec(), &out)
}

impl Denoiser for Blur {
    fn predict_noise(&self, x_t: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
        let scale = (1.0 - schedule.alpha_bar(t)?).sqrt();
        if scale == 0.0 {
            return Tensor::zeros(x_t.dims().to_vec());
        }
        let blurred = circular_blur(x_t, self.sigma)?;
        let data = x_t
            .data()
            .iter()
            .zip(blurred.data())
            .map(|(&a, &b)| ((a as f64 - b as f64) / scale) as f32)
            .collect();
        x_t.with_data(data)
    }
}

/// Data covariance assumed by [`OracleGaussian`].
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    /// `var0 · I`.
    Isotropic(f64),
    /// Stationary per channel: the variance of each unnormalized DFT coefficient
    /// divided by `H·W`, in channel-planar `[C][H][W]` order.
    Spectral(Vec<f64>),
}

/// Exact posterior-mean noise predictor for Gaussian data `x_0 ~ N(μ0, Σ)`.
#[derive(Debug, Clone)]
pub struct OracleGaussian {
    mu0: Tensor,
    covariance: Covariance,
}

impl OracleGaussian {
    /// `mu0` and the covariance are in model space.
    pub fn new(mu0: Tensor, covariance: Covariance) -> Result<Self> {
        let (h, w, c) = mu0.hwc()?;
        match &covariance {
            Covariance::Isotropic(v) if !(*v > 0.0 && v.is_finite()) => {
                return Err(Error::config(format!("oracle variance must be positive, got {v}")));
            }
            Covariance::Spectral(p) => {
                spectral::ensure_power_of_two(h, w)?;
                if p.len() != h * w * c {
                    return Err(Error::shape(format!(
                        "power spectrum has {} entries, expected {}",
                        p.len(),
                        h * w * c
                    )));
                }
                if p.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                    return Err(Error::config("power spectrum entries must be finite and >= 0"));
                }
            }
            _ => {}
        }
        mu0.check_finite()?;
        Ok(Self { mu0, covariance })
    }

    /// Builds the oracle from pixel-space statistics: a mean image in `[0, 1]`
    /// and a pixel-space covariance (scaled by 4 into model space).
    pub fn from_pixel_stats(mean: &Tensor, covariance: Covariance) -> Result<Self> {
        let mu0 = mean.map(|p| 2.0 * p - 1.0);
        let covariance = match covariance {
            Covariance::Isotropic(v) => Covariance::Isotropic(4.0 * v),
            Covariance::Spectral(p) => Covariance::Spectral(p.into_iter().map(|v| 4.0 * v).collect()),
        };
        Self::new(mu0, covariance)
    }

    pub fn mu0(&self) -> &Tensor {
        &self.mu0
    }

    pub fn covariance(&self) -> &Covariance {
        &self.covariance
    }
}

impl Denoiser for OracleGaussian {
    fn predict_noise(&self, x_t: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
        x_t.ensure_same_dims(&self.mu0, "oracle denoiser")?;
        let ab = schedule.alpha_bar(t)?;
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let centered: Vec<f64> = x_t
            .data()
            .iter()
            .zip(self.mu0.data())
            .map(|(&x, &m)| x as f64 - sa * m as f64)
            .collect();
        match &self.covariance {
            Covariance::Isotropic(var0) => {
                let gain = sn / (ab * var0 + 1.0 - ab);
                let out: Vec<f64> = centered.iter().map(|v| gain * v).collect();
                Tensor::from_f64(x_t.dims().to_vec(), &out)
            }
            Covariance::Spectral(power) => {
                let centered = Tensor::from_f64(x_t.dims().to_vec(), &centered)?;
                let spec = spectral::dft(&centered)?;
                let coeffs: Vec<Complex64> = spec
                    .coeffs()
                    .iter()
                    .zip(power)
                    .map(|(z, p)| z * (sn / (ab * p + 1.0 - ab)))
                    .collect();
                let filtered = Spectrum::new(spec.height(), spec.width(), spec.channels(), coeffs)?;
                spectral::idft(&filtered)
            }
        }
    }
}

/// Pixel-space mean image of a stack of `[H, W, C]` images.
pub fn mean_image(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::config("need at least one image"))?;
    let mut acc = vec![0.0f64; first.len()];
    for img in images {
        first.ensure_same_dims(img, "mean_image")?;
        for (a, &v) in acc.iter_mut().zip(img.data()) {
            *a += v as f64;
        }
    }
    let n = images.len() as f64;
    let mean: Vec<f64> = acc.into_iter().map(|v| v / n).collect();
    Tensor::from_f64(first.dims().to_vec(), &mean)
}

/// Average per-pixel variance of `images` about `mean`.
pub fn isotropic_variance(images: &[Tensor], mean: &Tensor) -> Result<f64> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for img in images {
        mean.ensure_same_dims(img, "isotropic_variance")?;
        for (&v, &m) in img.data().iter().zip(mean.data()) {
            acc += (v as f64 - m as f64).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::config("need at least one image"));
    }
    Ok(acc / count as f64)
}

/// Per-coefficient variance `E|dft(x - mean)|² / (H·W)` over `images`, channel-planar.
pub fn power_spectrum(images: &[Tensor], mean: &Tensor) -> Result<Vec<f64>> {
    let (h, w, c) = mean.hwc()?;
    let mut acc = vec![0.0f64; h * w * c];
    for img in images {
        mean.ensure_same_dims(img, "power_spectrum")?;
        let centered = img.with_data(img.data().iter().zip(mean.data()).map(|(a, b)| a - b).collect())?;
        let spec = spectral::dft(&centered)?;
        for (a, z) in acc.iter_mut().zip(spec.coeffs()) {
            *a += z.norm_sqr();
        }
    }
    if images.is_empty() {
        return Err(Error::config("need at least one image"));
    }
    let scale = (images.len() * h * w) as f64;
    Ok(acc.into_iter().map(|v| v / scale).collect())
}

/// Textual denoiser selection:
/// `identity`, `blur:sigma=<f>`, `oracle:mu=<path>,var=<f>` or `oracle:mu=<path>,power=<path>`.
/// Oracle paths point at pixel-space MPTF tensors; relative paths resolve against a base directory.
#[derive(Debug, Clone, PartialEq)]
pub enum DenoiserSpec {
    Identity,
    Blur { sigma: f64 },
    Oracle { mu: PathBuf, var: OracleVariance },
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleVariance {
    Isotropic(f64),
    Power(PathBuf),
}

impl FromStr for DenoiserSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, args) = match s.split_once(':') {
            Some((k, a)) => (k.trim(), a.trim()),
            None => (s.trim(), ""),
        };
        let mut fields = Vec::new();
        for part in args.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::config(format!("denoiser argument `{part}` is not key=value")))?;
            fields.push((k.trim(), v.trim()));
        }
        let take = |key: &str| fields.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
        let allow = |keys: &[&str]| -> Result<()> {
            match fields.iter().find(|(k, _)| !keys.contains(k)) {
                Some((k, _)) => Err(Error::config(format!("unknown denoiser argument `{k}` in `{s}`"))),
                None => Ok(()),
            }
        };
        let number = |key: &str, v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| Error::config(format!("denoiser argument {key}=`{v}` is not a number")))
        };
        match kind {
            "identity" => {
                allow(&[])?;
                Ok(Self::Identity)
            }
            "blur" => {
                allow(&["sigma"])?;
                let v = take("sigma").ok_or_else(|| Error::config("blur needs sigma=<f>"))?;
                let sigma = number("sigma", v)?;
                Blur::new(sigma)?;
                Ok(Self::Blur { sigma })
            }
            "oracle" => {
                allow(&["mu", "var", "power"])?;
                let mu = take("mu").ok_or_else(|| Error::config("oracle needs mu=<path>"))?;
                let var = match (take("var"), take("power")) {
                    (Some(v), None) => {
                        let var = number("var", v)?;
                        if !(var > 0.0) {
                            return Err(Error::config(format!("oracle var must be positive, got {var}")));
                        }
                        OracleVariance::Isotropic(var)
                    }
                    (None, Some(p)) => OracleVariance::Power(PathBuf::from(p)),
                    _ => return Err(Error::config("oracle needs exactly one of var=<f> or power=<path>")),
                };
                Ok(Self::Oracle {
                    mu: PathBuf::from(mu),
                    var,
                })
            }
            other => Err(Error::config(format!(
                "unknown denoiser `{other}` (expected identity, blur or oracle)"
            ))),
        }
    }
}

impl fmt::Display for DenoiserSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => write!(f, "identity"),
            Self::Blur { sigma } => write!(f, "blur:sigma={sigma}"),
            Self::Oracle { mu, var } => {
                write!(f, "oracle:mu={}", mu.display())?;
                match var {
                    OracleVariance::Isotropic(v) => write!(f, ",var={v}"),
                    OracleVariance::Power(p) => write!(f, ",power={}", p.display()),
                }
            }
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_prerequisite(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite {
            path: path.to_path_buf(),
            hint: "run `manipure gen-data` to produce the oracle statistics".into(),
        });
    }
    store::load_raw(path)
}

impl DenoiserSpec {
    pub fn build(&self, base_dir: &Path) -> Result<Box<dyn Denoiser>> {
        Ok(match self {
            Self::Identity => Box::new(Identity),
            Self::Blur { sigma } => Box::new(Blur::new(*sigma)?),
            Self::Oracle { mu, var } => {
                let mean = load_prerequisite(&resolve(base_dir, mu))?;
                let covariance = match var {
                    OracleVariance::Isotropic(v) => Covariance::Isotropic(*v),
                    OracleVariance::Power(p) => {
                        Covariance::Spectral(load_prerequisite(&resolve(base_dir, p))?.to_f64())
                    }
                };
                Box::new(OracleGaussian::from_pixel_stats(&mean, covariance)?)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::schedule::linear_schedule;
    use approx::assert_abs_diff_eq;

    fn schedule() -> NoiseSchedule {
        linear_schedule(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn parse_round_trip() {
        for s in [
            "identity",
            "blur:sigma=1.5",
            "oracle:mu=stats/mean.mptf,var=0.05",
            "oracle:mu=m.mptf,power=p.mptf",
        ] {
            let spec: DenoiserSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
    }

    #[test]
    fn parse_rejects_bad_specs() {
        for s in [
            "unet",
            "blur",
            "blur:sigma=-1",
            "blur:sigma=abc",
            "blur:sigma=1,radius=2",
            "oracle:var=0.1",
            "oracle:mu=a,var=0.1,power=b",
            "oracle:mu=a,var=0",
            "identity:x=1",
        ] {
            assert!(s.parse::<DenoiserSpec>().is_err(), "{s}");
        }
    }

    #[test]
    fn missing_oracle_file_is_a_prerequisite_error() {
        let spec: DenoiserSpec = "oracle:mu=nope.mptf,var=0.1".parse().unwrap();
        let err = spec.build(Path::new("/nonexistent-dir")).err().unwrap();
        assert!(matches!(err, Error::MissingPrerequisite { .. }));
    }

    #[test]
    fn blur_preserves_constants_and_mean() {
        let x = Tensor::filled(vec![8, 8, 3], 0.7).unwrap();
        let b = circular_blur(&x, 1.0).unwrap();
        for v in b.data() {
            assert!((v - 0.7).abs() < 1e-6);
        }
        let mut r = rng::seeded(2);
        let y = rng::standard_normal(vec![16, 16, 1], &mut r).unwrap();
        let by = circular_blur(&y, 1.3).unwrap();
        let s1: f64 = y.to_f64().iter().sum();
        let s2: f64 = by.to_f64().iter().sum();
        assert_abs_diff_eq!(s1, s2, epsilon = 1e-4);
        let v1: f64 = y.to_f64().iter().map(|v| v * v).sum();
        let v2: f64 = by.to_f64().iter().map(|v| v * v).sum();
        assert!(v2 < v1);
    }

    #[test]
    fn isotropic_oracle_formula() {
        let s = schedule();
        let mu = Tensor::filled(vec![8, 8, 1], 0.2).unwrap();
        let d = OracleGaussian::new(mu, Covariance::Isotropic(0.5)).unwrap();
        let x = Tensor::filled(vec![8, 8, 1], 1.0).unwrap();
        let ab = s.alpha_bar(100).unwrap();
        let expected = (1.0 - ab).sqrt() * (1.0 - ab.sqrt() * 0.2) / (ab * 0.5 + 1.0 - ab);
        let eps = d.predict_noise(&x, 100, &s).unwrap();
        for v in eps.data() {
            assert_abs_diff_eq!(*v as f64, expected, epsilon = 1e-6);
        }
    }

    #[test]
    fn flat_spectrum_matches_isotropic() {
        let s = schedule();
        let mut r = rng::seeded(9);
        let mu = rng::standard_normal(vec![8, 8, 3], &mut r).unwrap();
        let x = rng::standard_normal(vec![8, 8, 3], &mut r).unwrap();
        let iso = OracleGaussian::new(mu.clone(), Covariance::Isotropic(0.3)).unwrap();
        let spec = OracleGaussian::new(mu, Covariance::Spectral(vec![0.3; 192])).unwrap();
        let a = iso.predict_noise(&x, 50, &s).unwrap();
        let b = spec.predict_noise(&x, 50, &s).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-5);
        }
    }

    #[test]
    fn spectral_oracle_matches_monte_carlo_regression() {
        // For stationary Gaussian data, E[ε | x_t] is the least-squares linear predictor.
        // Check the per-frequency gain against a regression over samples.
        let s = schedule();
        let (h, w) = (8usize, 8usize);
        let power: Vec<f64> = (0..h * w)
            .map(|i| {
                let (u, v) = (i / w, i % w);
                let r = spectral::normalized_radius(u, v, h, w);
                0.5 * (-4.0 * r).exp() + 0.01
            })
            .collect();
        let mu = Tensor::zeros(vec![h, w, 1]).unwrap();
        let d = OracleGaussian::new(mu, Covariance::Spectral(power.clone())).unwrap();
        let t = 200;
        let ab = s.alpha_bar(t).unwrap();
        let mut r = rng::seeded(17);
        let mut num = vec![0.0f64; h * w];
        let mut den = vec![0.0f64; h * w];
        let mut fit_num = vec![0.0f64; h * w];
        for _ in 0..4000 {
            // Sample x_0 by coloring white noise with √power.
            let white = rng::standard_normal(vec![h, w, 1], &mut r).unwrap();
            let spec = spectral::dft(&white).unwrap();
            let colored: Vec<Complex64> = spec.coeffs().iter().zip(&power).map(|(z, p)| z * p.sqrt()).collect();
            let x0 = spectral::idft(&Spectrum::new(h, w, 1, colored).unwrap()).unwrap();
            let eps = rng::standard_normal(vec![h, w, 1], &mut r).unwrap();
            let xt = x0
                .with_data(
                    x0.data()
                        .iter()
                        .zip(eps.data())
                        .map(|(a, e)| (ab.sqrt() * *a as f64 + (1.0 - ab).sqrt() * *e as f64) as f32)
                        .collect(),
                )
                .unwrap();
            let pred = d.predict_noise(&xt, t, &s).unwrap();
            let (fx, fe, fp) = (
                spectral::dft(&xt).unwrap(),
                spectral::dft(&eps).unwrap(),
                spectral::dft(&pred).unwrap(),
            );
            for k in 0..h * w {
                let xk = fx.coeffs()[k];
                num[k] += (fe.coeffs()[k] * xk.conj()).re;
                den[k] += xk.norm_sqr();
                fit_num[k] += (fp.coeffs()[k] * xk.conj()).re;
            }
        }
        for k in 0..h * w {
            let empirical = num[k] / den[k];
            let oracle = fit_num[k] / den[k];
            assert!((empirical - oracle).abs() < 0.05, "cell {k}: {empirical} vs {oracle}");
        }
    }

    #[test]
    fn fitted_statistics() {
        let imgs: Vec<Tensor> = (0..4)
            .map(|i| Tensor::filled(vec![8, 8, 1], i as f32 * 0.25).unwrap())
            .collect();
        let mean = mean_image(&imgs).unwrap();
        assert_abs_diff_eq!(mean.data()[0] as f64, 0.375, epsilon = 1e-7);
        let var = isotropic_variance(&imgs, &mean).unwrap();
        assert_abs_diff_eq!(var, 0.078125, epsilon = 1e-9);
        let p = power_spectrum(&imgs, &mean).unwrap();
        // Constant images put all variance at DC: |HW·d|²/(HW) = HW·d².
        assert_abs_diff_eq!(p[0], 64.0 * var, epsilon = 1e-6);
        let total: f64 = p.iter().sum::<f64>() / 64.0;
        assert_abs_diff_eq!(total, var, epsilon = 1e-9);
        assert!(p[1..].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn pixel_stats_conversion() {
        let mean = Tensor::filled(vec![8, 8, 1], 0.5).unwrap();
        let d = OracleGaussian::from_pixel_stats(&mean, Covariance::Isotropic(0.01)).unwrap();
        assert!(d.mu0().data().iter().all(|v| v.abs() < 1e-7));
        assert_eq!(d.covariance(), &Covariance::Isotropic(0.04));
    }
}
