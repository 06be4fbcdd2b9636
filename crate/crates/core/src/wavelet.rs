//! Single-level orthonormal 2D Haar transform.
//!
//! Filters are `(1/√2, 1/√2)` (low) and `(1/√2, −1/√2)` (high), applied along
//! width first and then height, with stride 2. For a 2×2 block `[[a, b], [c, d]]`
//! the separable product collapses to
//!
//! ```text
//! LL = (a + b + c + d) / 2    HL = (a − b + c − d) / 2
//! LH = (a + b − c − d) / 2    HH = (a − b − c + d) / 2
//! ```
//!
//! so `HL` carries horizontal detail (high-pass across width) and `LH` vertical
//! detail. An odd dimension is extended by one mirrored sample before filtering,
//! and the inverse truncates back to the source size.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// The four bands of one decomposition level, as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct SubBandSet<T: Float = f32> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
    pub source_height: usize,
    pub source_width: usize,
}

/// The four bands of one decomposition level, recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SubBandVars {
    pub ll: Var,
    pub lh: Var,
    pub hl: Var,
    pub hh: Var,
    pub source_height: usize,
    pub source_width: usize,
}

impl<T: Float> SubBandSet<T> {
    pub fn bands(&self) -> [&Tensor<T>; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    pub fn energy(&self) -> f64 {
        self.bands().iter().map(|b| b.sum_sq()).sum()
    }

    fn validate(&self) -> Result<[usize; 4]> {
        let dims = self.ll.dims4("idwt2")?;
        for b in &self.bands()[1..] {
            if b.shape() != self.ll.shape() {
                return Err(Error::shape(
                    "idwt2",
                    format!("band shapes differ: {:?} vs {:?}", b.shape(), self.ll.shape()),
                ));
            }
        }
        check_source(dims, self.source_height, self.source_width)?;
        Ok(dims)
    }
}

fn check_source(dims: [usize; 4], h: usize, w: usize) -> Result<()> {
    if h.div_ceil(2) != dims[2] || w.div_ceil(2) != dims[3] || h < 2 || w < 2 {
        return Err(Error::shape("idwt2", format!("bands {}x{} cannot come from a {h}x{w} source", dims[2], dims[3])));
    }
    Ok(())
}

/// Forward transform on a plain tensor.
pub fn dwt2<T: Float>(x: &Tensor<T>) -> Result<SubBandSet<T>> {
    let [n, c, h, w] = x.dims4("dwt2")?;
    if h < 2 || w < 2 {
        return Err(Error::shape("dwt2", format!("spatial dims must be >= 2, got {h}x{w}")));
    }
    let (hh_, wh) = (h.div_ceil(2), w.div_ceil(2));
    let band_shape = [n, c, hh_, wh];
    let mut out = [(); 4].map(|_| Tensor::<T>::zeros(&band_shape));
    let half = T::lit(0.5);
    let src = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        let obase = plane * hh_ * wh;
        for oy in 0..hh_ {
            let y0 = 2 * oy;
            let y1 = (y0 + 1).min(h - 1);
            for ox in 0..wh {
                let x0 = 2 * ox;
                let x1 = (x0 + 1).min(w - 1);
                let a = src[base + y0 * w + x0];
                let b = src[base + y0 * w + x1];
                let cc = src[base + y1 * w + x0];
                let d = src[base + y1 * w + x1];
                let o = obase + oy * wh + ox;
                out[0].data_mut()[o] = (a + b + cc + d) * half;
                out[1].data_mut()[o] = (a + b - cc - d) * half;
                out[2].data_mut()[o] = (a - b + cc - d) * half;
                out[3].data_mut()[o] = (a - b - cc + d) * half;
            }
        }
    }
    let [ll, lh, hl, hh] = out;
    Ok(SubBandSet { ll, lh, hl, hh, source_height: h, source_width: w })
}

/// Inverse transform on plain tensors.
pub fn idwt2<T: Float>(bands: &SubBandSet<T>) -> Result<Tensor<T>> {
    let dims = bands.validate()?;
    Ok(synthesize(
        [bands.ll.data(), bands.lh.data(), bands.hl.data(), bands.hh.data()],
        dims,
        bands.source_height,
        bands.source_width,
    ))
}

/// Inverse block transform; samples beyond the source extent are dropped.
pub(crate) fn synthesize<T: Float>(bands: [&[T]; 4], dims: [usize; 4], h: usize, w: usize) -> Tensor<T> {
    let [n, c, hh_, wh] = dims;
    let mut out = Tensor::<T>::zeros(&[n, c, h, w]);
    let half = T::lit(0.5);
    let dst = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        let bbase = plane * hh_ * wh;
        for oy in 0..hh_ {
            let y0 = 2 * oy;
            let y1 = y0 + 1;
            for ox in 0..wh {
                let x0 = 2 * ox;
                let x1 = x0 + 1;
                let i = bbase + oy * wh + ox;
                let (ll, lh, hl, hh) = (bands[0][i], bands[1][i], bands[2][i], bands[3][i]);
                dst[base + y0 * w + x0] = (ll + hl + lh + hh) * half;
                if x1 < w {
                    dst[base + y0 * w + x1] = (ll - hl + lh - hh) * half;
                }
                if y1 < h {
                    dst[base + y1 * w + x0] = (ll + hl - lh - hh) * half;
                    if x1 < w {
                        dst[base + y1 * w + x1] = (ll - hl - lh + hh) * half;
                    }
                }
            }
        }
    }
    out
}

/// Transpose of [`dwt2`]: mirrored samples fold their gradient back onto the edge.
pub(crate) fn dwt2_adjoint<T: Float>(grads: [&[T]; 4], dims: [usize; 4], h: usize, w: usize) -> Vec<T> {
    let [n, c, hh_, wh] = dims;
    let mut dx = vec![T::zero(); n * c * h * w];
    let half = T::lit(0.5);
    for plane in 0..n * c {
        let base = plane * h * w;
        let bbase = plane * hh_ * wh;
        for oy in 0..hh_ {
            let y0 = 2 * oy;
            let y1 = (y0 + 1).min(h - 1);
            for ox in 0..wh {
                let x0 = 2 * ox;
                let x1 = (x0 + 1).min(w - 1);
                let i = bbase + oy * wh + ox;
                let (ll, lh, hl, hh) = (grads[0][i], grads[1][i], grads[2][i], grads[3][i]);
                dx[base + y0 * w + x0] += (ll + hl + lh + hh) * half;
                dx[base + y0 * w + x1] += (ll - hl + lh - hh) * half;
                dx[base + y1 * w + x0] += (ll + hl - lh - hh) * half;
                dx[base + y1 * w + x1] += (ll - hl - lh + hh) * half;
            }
        }
    }
    dx
}

/// Transpose of [`idwt2`]: truncated samples contribute nothing.
pub(crate) fn idwt2_adjoint<T: Float>(grad: &[T], dims: [usize; 4], h: usize, w: usize) -> [Vec<T>; 4] {
    let [n, c, hh_, wh] = dims;
    let len = n * c * hh_ * wh;
    let mut out = [(); 4].map(|_| vec![T::zero(); len]);
    let half = T::lit(0.5);
    let at = |base: usize, y: usize, x: usize| {
        if y < h && x < w {
            grad[base + y * w + x]
        } else {
            T::zero()
        }
    };
    for plane in 0..n * c {
        let base = plane * h * w;
        let bbase = plane * hh_ * wh;
        for oy in 0..hh_ {
            for ox in 0..wh {
                let a = at(base, 2 * oy, 2 * ox);
                let b = at(base, 2 * oy, 2 * ox + 1);
                let cc = at(base, 2 * oy + 1, 2 * ox);
                let d = at(base, 2 * oy + 1, 2 * ox + 1);
                let i = bbase + oy * wh + ox;
                out[0][i] = (a + b + cc + d) * half;
                out[1][i] = (a + b - cc - d) * half;
                out[2][i] = (a - b + cc - d) * half;
                out[3][i] = (a - b - cc + d) * half;
            }
        }
    }
    out
}

/// Differentiable forward transform.
pub fn dwt2_var<T: Float>(tape: &mut Tape<T>, x: Var) -> Result<SubBandVars> {
    tape.dwt2(x)
}

/// Differentiable inverse transform.
pub fn idwt2_var<T: Float>(tape: &mut Tape<T>, bands: &SubBandVars) -> Result<Var> {
    tape.idwt2(bands)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn constant_image_has_no_detail() {
        let v = 0.3f64;
        let x = Tensor::full(&[1, 1, 4, 4], v);
        let b = dwt2(&x).unwrap();
        assert!(b.ll.data().iter().all(|&l| (l - 2.0 * v).abs() < 1e-12));
        for d in [&b.lh, &b.hl, &b.hh] {
            assert!(d.data().iter().all(|&z| z == 0.0));
        }
    }

    #[test]
    fn two_by_two_block_closed_form() {
        let (a, b, c, d) = (1.0f64, 2.0, 5.0, 11.0);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![a, b, c, d]).unwrap();
        let s = dwt2(&x).unwrap();
        assert_eq!(s.ll.data()[0], (a + b + c + d) / 2.0);
        assert_eq!(s.hl.data()[0], (a - b + c - d) / 2.0);
        assert_eq!(s.lh.data()[0], (a + b - c - d) / 2.0);
        assert_eq!(s.hh.data()[0], (a - b - c + d) / 2.0);
    }

    #[test]
    fn inverse_of_constant_bands() {
        let v = -0.7f64;
        let bands = SubBandSet {
            ll: Tensor::full(&[1, 1, 2, 2], 2.0 * v),
            lh: Tensor::zeros(&[1, 1, 2, 2]),
            hl: Tensor::zeros(&[1, 1, 2, 2]),
            hh: Tensor::zeros(&[1, 1, 2, 2]),
            source_height: 4,
            source_width: 4,
        };
        let x = idwt2(&bands).unwrap();
        assert!(x.data().iter().all(|&p| (p - v).abs() < 1e-12));
    }

    #[test]
    fn zero_bands_give_zero_image() {
        let z = Tensor::<f32>::zeros(&[2, 3, 3, 5]);
        let bands =
            SubBandSet { ll: z.clone(), lh: z.clone(), hl: z.clone(), hh: z, source_height: 6, source_width: 9 };
        let x = idwt2(&bands).unwrap();
        assert_eq!(x.shape(), &[2, 3, 6, 9]);
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn odd_dims_pad_and_truncate() {
        let x = rand_tensor(&[1, 2, 7, 5], 3);
        let b = dwt2(&x).unwrap();
        assert_eq!(b.ll.shape(), &[1, 2, 4, 3]);
        let back = idwt2(&b).unwrap();
        assert_eq!(back.shape(), x.shape());
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn rejects_tiny_and_mismatched_inputs() {
        assert!(dwt2(&Tensor::<f32>::zeros(&[1, 1, 1, 4])).is_err());
        assert!(dwt2(&Tensor::<f32>::zeros(&[4, 4])).is_err());
        let mut b = dwt2(&Tensor::<f32>::zeros(&[1, 1, 4, 4])).unwrap();
        b.hh = Tensor::zeros(&[1, 1, 2, 3]);
        assert!(idwt2(&b).is_err());
        let mut b = dwt2(&Tensor::<f32>::zeros(&[1, 1, 4, 4])).unwrap();
        b.source_width = 8;
        assert!(idwt2(&b).is_err());
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity_with_odd_dims() {
        // <dwt(x), g> == <x, dwt_adjoint(g)> holds for odd sizes too.
        let x = rand_tensor(&[1, 2, 5, 7], 10);
        let g = [11, 12, 13, 14].map(|s| rand_tensor(&[1, 2, 3, 4], s));
        let b = dwt2(&x).unwrap();
        let lhs: f64 = b.bands().iter().zip(&g).map(|(b, g)| b.dot(g)).sum();
        let dx = dwt2_adjoint([g[0].data(), g[1].data(), g[2].data(), g[3].data()], [1, 2, 3, 4], 5, 7);
        let rhs: f64 = x.data().iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);

        let y = rand_tensor(&[1, 2, 5, 7], 20);
        let set = SubBandSet {
            ll: g[0].clone(),
            lh: g[1].clone(),
            hl: g[2].clone(),
            hh: g[3].clone(),
            source_height: 5,
            source_width: 7,
        };
        let lhs = idwt2(&set).unwrap().dot(&y);
        let gb = idwt2_adjoint(y.data(), [1, 2, 3, 4], 5, 7);
        let rhs: f64 = g.iter().zip(&gb).map(|(t, v)| t.data().iter().zip(v).map(|(a, b)| a * b).sum::<f64>()).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
