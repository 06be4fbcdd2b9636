//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes plain numbers and returns flat buffers, so the page
//! needs no glue beyond what `wasm-bindgen` generates.

use wasm_bindgen::prelude::*;
use wavelatent::data::{self, denormalize};
use wavelatent::metrics::{self, DATA_RANGE};
use wavelatent::model::GaussianPosterior;
use wavelatent::training::kl_loss;
use wavelatent::{dwt2, rng, Tensor};

fn check_size(size: usize) -> Result<(), JsError> {
    if size < 16 || !size.is_multiple_of(2) || size > 512 {
        return Err(JsError::new(&format!("tile size must be even and within 16..=512, got {size}")));
    }
    Ok(())
}

fn tile(seed: u32, size: usize) -> Tensor<f32> {
    data::synth_tile(0, size, rng::stream_seed(seed as u64, rng::SYNTH)).tensor()
}

/// Write a `1 x C x h x w` tensor into an RGBA canvas buffer at (`x0`, `y0`),
/// mapping `[lo, hi]` onto 0..=255.
fn blit(rgba: &mut [u8], stride: usize, x0: usize, y0: usize, t: &Tensor<f32>, lo: f32, hi: f32) {
    let (c, h, w) = (t.shape()[1], t.shape()[2], t.shape()[3]);
    let span = if hi > lo { hi - lo } else { 1.0 };
    for y in 0..h {
        for x in 0..w {
            let o = 4 * ((y0 + y) * stride + x0 + x);
            for ch in 0..3 {
                let v = t.data()[(ch.min(c - 1) * h + y) * w + x];
                rgba[o + ch] = denormalize(2.0 * (v - lo) / span - 1.0);
            }
            rgba[o + 3] = 255;
        }
    }
}

fn range(t: &Tensor<f32>) -> (f32, f32) {
    t.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)))
}

/// RGBA image `2 * size` wide and `size` tall: the tile on the left, its
/// four sub-bands (LL, LH / HL, HH) on the right, each band rescaled to full range.
#[wasm_bindgen]
pub fn dwt_mosaic(seed: u32, size: usize) -> Result<Vec<u8>, JsError> {
    check_size(size)?;
    let x = tile(seed, size);
    let bands = dwt2(&x).map_err(|e| JsError::new(&e.to_string()))?;
    let stride = 2 * size;
    let mut rgba = vec![0u8; 4 * stride * size];
    blit(&mut rgba, stride, 0, 0, &x, -1.0, 1.0);
    let half = size / 2;
    for (i, band) in bands.bands().iter().enumerate() {
        let (lo, hi) = range(band);
        blit(&mut rgba, stride, size + (i % 2) * half, (i / 2) * half, band, lo, hi);
    }
    Ok(rgba)
}

/// Fraction of the tile's energy in LL, LH, HL, HH.
#[wasm_bindgen]
pub fn band_energy(seed: u32, size: usize) -> Result<Vec<f64>, JsError> {
    check_size(size)?;
    let x = tile(seed, size);
    let bands = dwt2(&x).map_err(|e| JsError::new(&e.to_string()))?;
    let total = x.sum_sq().max(f64::MIN_POSITIVE);
    Ok(bands.bands().iter().map(|b| b.sum_sq() / total).collect())
}

/// Add Gaussian noise of standard deviation `sigma` (in [-1, 1] units) to a tile.
///
/// Returns `[psnr_db, ssim]` followed by the noisy tile as RGBA.
#[wasm_bindgen]
pub fn noisy_quality(seed: u32, size: usize, sigma: f64) -> Result<Vec<f64>, JsError> {
    check_size(size)?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(JsError::new("sigma must be finite and >= 0"));
    }
    let x = tile(seed, size);
    let noise = Tensor::<f32>::randn(x.shape(), sigma, &mut rng::stream(seed as u64, "web/noise"));
    let data = x.data().iter().zip(noise.data()).map(|(a, n)| (a + n).clamp(-1.0, 1.0)).collect();
    let y = Tensor::new(x.shape().to_vec(), data).map_err(|e| JsError::new(&e.to_string()))?;
    let psnr = metrics::psnr(&x, &y, DATA_RANGE).map_err(|e| JsError::new(&e.to_string()))?;
    let ssim = metrics::ssim(&x, &y, DATA_RANGE).map_err(|e| JsError::new(&e.to_string()))?;
    let mut rgba = vec![0u8; 4 * size * size];
    blit(&mut rgba, size, 0, 0, &y, -1.0, 1.0);
    let mut out = vec![psnr, ssim];
    out.extend(rgba.into_iter().map(f64::from));
    Ok(out)
}

/// Histogram of `z = mean + exp(log_var / 2) * eps` over `[-6, 6]`.
///
/// Returns `bins` counts followed by the sample mean, sample variance, and the
/// closed-form KL divergence to the standard normal.
#[wasm_bindgen]
pub fn reparam_histogram(mean: f64, log_var: f64, samples: usize, bins: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    if bins == 0 || samples == 0 || samples > 2_000_000 {
        return Err(JsError::new("need bins > 0 and 0 < samples <= 2e6"));
    }
    let post = GaussianPosterior {
        mean: Tensor::<f64>::full(&[1, 1, 1, samples], mean),
        log_var: Tensor::full(&[1, 1, 1, samples], log_var.clamp(-30.0, 20.0)),
    };
    let z = post.sample(&mut rng::stream(seed as u64, rng::SAMPLING));
    let mut hist = vec![0.0; bins];
    for &v in z.data() {
        let b = ((v + 6.0) / 12.0 * bins as f64).floor();
        if (0.0..bins as f64).contains(&b) {
            hist[b as usize] += 1.0;
        }
    }
    let n = samples as f64;
    let mu = z.data().iter().sum::<f64>() / n;
    let var = z.data().iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let single =
        GaussianPosterior { mean: Tensor::full(&[1, 1, 1, 1], mean), log_var: Tensor::full(&[1, 1, 1, 1], log_var) };
    hist.extend([mu, var, kl_loss(&single)]);
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mosaic_has_expected_layout() {
        let rgba = dwt_mosaic(1, 32).unwrap();
        assert_eq!(rgba.len(), 4 * 64 * 32);
        assert!(rgba.chunks(4).all(|p| p[3] == 255));
        let e = band_energy(1, 32).unwrap();
        assert!((e.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn zero_noise_is_perfect() {
        let q = noisy_quality(2, 32, 0.0).unwrap();
        assert_eq!(q[0], metrics::PSNR_CAP_DB);
        assert_eq!(q[1], 1.0);
        assert_eq!(q.len(), 2 + 4 * 32 * 32);
        let noisy = noisy_quality(2, 32, 0.2).unwrap();
        assert!(noisy[0] < 30.0 && noisy[1] < 1.0);
    }

    #[test]
    fn histogram_statistics() {
        let h = reparam_histogram(0.5, 0.0, 50_000, 24, 3).unwrap();
        let (counts, stats) = h.split_at(24);
        assert!((counts.iter().sum::<f64>() - 50_000.0).abs() < 10.0);
        assert!((stats[0] - 0.5).abs() < 0.02);
        assert!((stats[1] - 1.0).abs() < 0.03);
        assert!((stats[2] - 0.125).abs() < 1e-12);
    }
}
