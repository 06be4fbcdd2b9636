//! Reconstruction and latent-space metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// PSNR reported for a pair with zero error.
pub const PSNR_CAP_DB: f64 = 100.0;
/// Value span of images normalized to [-1, 1].
pub const DATA_RANGE: f64 = 2.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// One row of a comparison table. Field names match `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub arch: String,
    pub variance: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub n: usize,
    pub config_hash: String,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format { what: "metric report", detail: m });
        if !matches!(self.arch.as_str(), "baseline" | "expdwt") {
            return bad(format!("unknown arch {}", self.arch));
        }
        if !(self.variance.is_finite() && self.variance >= 0.0) {
            return bad(format!("variance {} must be finite and >= 0", self.variance));
        }
        if !(self.psnr_db.is_finite() && self.psnr_db > 0.0 && self.psnr_db <= PSNR_CAP_DB) {
            return bad(format!("psnr_db {} outside (0, {PSNR_CAP_DB}]", self.psnr_db));
        }
        if !(-1.0..=1.0).contains(&self.ssim) {
            return bad(format!("ssim {} outside [-1, 1]", self.ssim));
        }
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if self.config_hash.is_empty() || !self.config_hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return bad(format!("config_hash {:?} is not hex", self.config_hash));
        }
        Ok(())
    }

    /// Parse and validate a `report.json` document.
    pub fn from_json(text: &str) -> Result<Self> {
        let r: MetricReport = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }
}

fn same_shape<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Population variance of each latent element across the eval set, averaged over elements.
pub fn latent_variance<T: Float>(means: &[Tensor<T>]) -> Result<f64> {
    if means.len() < 2 {
        return Err(Error::Config(format!("latent variance needs at least 2 samples, got {}", means.len())));
    }
    let first = &means[0];
    for m in means {
        same_shape("latent_variance", first, m)?;
    }
    let count = means.len() as f64;
    let numel = first.numel();
    let mut mean = vec![0.0f64; numel];
    for m in means {
        for (acc, v) in mean.iter_mut().zip(m.data()) {
            *acc += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|v| *v /= count);
    let mut var = vec![0.0f64; numel];
    for m in means {
        for ((acc, v), mu) in var.iter_mut().zip(m.data()).zip(&mean) {
            let d = v.as_f64() - mu;
            *acc += d * d;
        }
    }
    Ok(var.iter().map(|v| v / count).sum::<f64>() / numel as f64)
}

pub fn mse<T: Float>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    same_shape("mse", x, y)?;
    let total: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    Ok(total / x.numel() as f64)
}

/// `10 log10(range^2 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Float>(x: &Tensor<T>, y: &Tensor<T>, data_range: f64) -> Result<f64> {
    let err = mse(x, y)?;
    if err == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / err).log10()).min(PSNR_CAP_DB))
}

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM of two grayscale planes over valid window positions.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, data_range: f64) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::shape("ssim", format!("planes of {} and {} values for {h}x{w}", a.len(), b.len())));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let aa = filter_valid(&prod(|x, _| x * x), h, w, &taps);
    let bb = filter_valid(&prod(|_, y| y * y), h, w, &taps);
    let ab = filter_valid(&prod(|x, y| x * y), h, w, &taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}

/// Channel-mean grayscale planes of an NCHW tensor.
pub fn grayscale<T: Float>(x: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let [n, c, h, w] = x.dims4("grayscale")?;
    let plane = h * w;
    Ok((0..n)
        .map(|i| {
            let item = &x.data()[i * c * plane..(i + 1) * c * plane];
            (0..plane).map(|p| (0..c).map(|ch| item[ch * plane + p].as_f64()).sum::<f64>() / c as f64).collect()
        })
        .collect())
}

/// Mean per-image SSIM over a batch, on channel-mean grayscale.
pub fn ssim<T: Float>(x: &Tensor<T>, y: &Tensor<T>, data_range: f64) -> Result<f64> {
    same_shape("ssim", x, y)?;
    let [n, _, h, w] = x.dims4("ssim")?;
    let (gx, gy) = (grayscale(x)?, grayscale(y)?);
    let mut total = 0.0;
    for (a, b) in gx.iter().zip(&gy) {
        total += ssim_plane(a, b, h, w, data_range)?;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rand(shape: &[usize], seed: u64) -> Tensor<f32> {
        Tensor::uniform(shape, -1.0, 1.0, &mut rng::stream(seed, "metrics"))
    }

    #[test]
    fn latent_variance_hand_values() {
        let a = Tensor::<f32>::full(&[1, 1, 1, 1], 0.0);
        let b = Tensor::<f32>::full(&[1, 1, 1, 1], 2.0);
        assert_eq!(latent_variance(&[a.clone(), b]).unwrap(), 1.0);
        assert_eq!(latent_variance(&[a.clone(), a.clone(), a.clone()]).unwrap(), 0.0);
        assert!(latent_variance(&[a]).is_err());
    }

    #[test]
    fn latent_variance_is_permutation_invariant() {
        let items: Vec<_> = (0..5).map(|s| rand(&[1, 2, 3, 3], s)).collect();
        let mut rev = items.clone();
        rev.reverse();
        let (a, b) = (latent_variance(&items).unwrap(), latent_variance(&rev).unwrap());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn psnr_endpoints() {
        let x = rand(&[1, 3, 8, 8], 1);
        assert_eq!(psnr(&x, &x, DATA_RANGE).unwrap(), PSNR_CAP_DB);
        let zeros = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let twos = Tensor::<f32>::full(&[1, 1, 2, 2], 2.0);
        assert!(psnr(&zeros, &twos, 2.0).unwrap().abs() < 1e-12);
        assert!(psnr(&zeros, &Tensor::zeros(&[1, 1, 2, 3]), 2.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_error() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let mut last = f64::INFINITY;
        for k in 1..10 {
            let y = Tensor::full(&[1, 1, 4, 4], 0.05 * k as f64);
            let p = psnr(&x, &y, 2.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_negation_and_symmetry() {
        let x = rand(&[2, 3, 16, 16], 2);
        assert_eq!(ssim(&x, &x, DATA_RANGE).unwrap(), 1.0);
        // Same local means, inverted structure.
        let up = x.map(|v| 0.5 + 0.4 * v);
        let down = x.map(|v| 0.5 - 0.4 * v);
        assert!(ssim(&up, &down, DATA_RANGE).unwrap() < 0.0);
        let y = rand(&[2, 3, 16, 16], 3);
        let (ab, ba) = (ssim(&x, &y, 2.0).unwrap(), ssim(&y, &x, 2.0).unwrap());
        assert!((ab - ba).abs() < 1e-7);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let x = rand(&[1, 3, 10, 16], 4);
        assert!(ssim(&x, &x, 2.0).is_err());
    }

    #[test]
    fn window_is_normalized_and_symmetric() {
        let g = gaussian_window(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((g[0] - g[10]).abs() < 1e-15);
        assert!(g[5] > g[4]);
    }

    #[test]
    fn report_validation() {
        let good = MetricReport {
            arch: "expdwt".into(),
            variance: 0.3,
            psnr_db: 21.0,
            ssim: 0.6,
            n: 50,
            config_hash: "00ff".into(),
        };
        good.validate().unwrap();
        let text = serde_json::to_string(&good).unwrap();
        assert_eq!(MetricReport::from_json(&text).unwrap(), good);
        assert!(MetricReport { ssim: 1.5, ..good.clone() }.validate().is_err());
        assert!(MetricReport { variance: -1.0, ..good.clone() }.validate().is_err());
        assert!(MetricReport { arch: "vae".into(), ..good.clone() }.validate().is_err());
        assert!(MetricReport::from_json(r#"{"arch":"expdwt"}"#).is_err());
    }
}
