//! im2col convolution kernels shared by the tape's forward and backward rules.

use crate::error::{Error, Result};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: [usize; 4], weight: &[usize], bias: Option<&[usize]>, stride: usize, pad: usize) -> Result<Self> {
        let [n, cin, h, w] = input;
        let [cout, wcin, kh, kw] = match *weight {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::shape("conv2d", format!("weight must be rank 4, got {weight:?}"))),
        };
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but weight {weight:?} expects {wcin}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel must be square and odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kh {
            return Err(Error::shape(
                "conv2d",
                format!("{h}x{w} input with padding {pad} is smaller than kernel {kh}"),
            ));
        }
        if let Some(b) = bias {
            if b != [cout] {
                return Err(Error::shape("conv2d", format!("bias {b:?} does not match {cout} output channels")));
            }
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kh) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Float>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let plane = g.ho * g.wo;
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let plane = g.ho * g.wo;
    for c in 0..g.cin {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Float>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * cols;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
    for item in 0..g.n {
        let xi = &x[item * in_len..(item + 1) * in_len];
        let oi = &mut out[item * out_len..(item + 1) * out_len];
        if let Some(b) = bias {
            for (co, chunk) in oi.chunks_mut(cols).enumerate() {
                chunk.fill(b[co]);
            }
        }
        let patches: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(g, xi, &mut col);
            &col
        };
        T::gemm(
            g.cout,
            rows,
            cols,
            weight,
            (rows as isize, 1),
            patches,
            (cols as isize, 1),
            T::one(),
            oi,
            (cols as isize, 1),
        );
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Float>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dout: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * cols;
    let mut dx = need.0.then(|| vec![T::zero(); g.n * in_len]);
    let mut dw = need.1.then(|| vec![T::zero(); g.cout * rows]);
    let mut db = need.2.then(|| vec![T::zero(); g.cout]);
    let mut col = vec![T::zero(); rows * cols];
    for item in 0..g.n {
        let gi = &dout[item * out_len..(item + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in gi.chunks(cols).enumerate() {
                db[co] += chunk.iter().copied().sum();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xi = &x[item * in_len..(item + 1) * in_len];
            let patches: &[T] = if g.is_pointwise() {
                xi
            } else {
                im2col(g, xi, &mut col);
                &col
            };
            // dW[cout, rows] += dOut[cout, cols] * patches^T
            T::gemm(
                g.cout,
                cols,
                rows,
                gi,
                (cols as isize, 1),
                patches,
                (1, cols as isize),
                T::one(),
                dw,
                (rows as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let di = &mut dx[item * in_len..(item + 1) * in_len];
            if g.is_pointwise() {
                T::gemm(
                    rows,
                    g.cout,
                    cols,
                    weight,
                    (1, rows as isize),
                    gi,
                    (cols as isize, 1),
                    T::one(),
                    di,
                    (cols as isize, 1),
                );
            } else {
                // dcol[rows, cols] = W^T * dOut
                T::gemm(
                    rows,
                    g.cout,
                    cols,
                    weight,
                    (1, rows as isize),
                    gi,
                    (cols as isize, 1),
                    T::zero(),
                    &mut col,
                    (cols as isize, 1),
                );
                col2im(g, &col, di);
            }
        }
    }
    ConvGrads { input: dx, weight: dw, bias: db }
}
