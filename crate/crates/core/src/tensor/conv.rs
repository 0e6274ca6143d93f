//! 2-D cross-correlation through im2col and a single GEMM per batch item.

use super::{gemm, MatRef, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (&[batch, c_in, h, w], &[c_out, wc, kh, kw]) = (input, weight) else {
            return Err(Error::ShapeMismatch(format!(
                "conv2d wants rank-4 input and weight, got {input:?} and {weight:?}"
            )));
        };
        if wc != c_in {
            return Err(Error::ShapeMismatch(format!(
                "conv2d input has {c_in} channels but weight expects {wc}"
            )));
        }
        if bias != [c_out] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d bias shape {bias:?}, expected [{c_out}]"
            )));
        }
        if stride == 0 {
            return Err(Error::ShapeMismatch("conv2d stride must be positive".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::ShapeMismatch(format!(
                "kernel {kh}x{kw} does not fit padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `c_in x h x w` image into a `(c_in*kh*kw) x (oh*ow)` matrix.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back onto the image.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), bias.shape(), stride, pad)?;
    let plane = g.out_plane();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * plane;
    let mut out = vec![T::zero(); g.batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * plane]
    };
    let wmat = MatRef::new(weight.data(), g.c_out, g.patch_len());
    for n in 0..g.batch {
        let xn = &x.data()[n * in_len..(n + 1) * in_len];
        let yn = &mut out[n * out_len..(n + 1) * out_len];
        for (o, chunk) in yn.chunks_mut(plane).enumerate() {
            chunk.fill(bias.data()[o]);
        }
        let colm = if g.is_pointwise() {
            MatRef::new(xn, g.patch_len(), plane)
        } else {
            im2col(xn, &g, &mut cols);
            MatRef::new(&cols[..], g.patch_len(), plane)
        };
        gemm(wmat, colm, T::one(), yn);
    }
    Tensor::from_vec(&[g.batch, g.c_out, g.oh, g.ow], out)
}

pub(crate) struct ConvGrads<T: Real> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &[T],
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), bias.shape(), stride, pad)?;
    let plane = g.out_plane();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * plane;
    let k = g.patch_len();

    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); weight.numel()];
    let mut db = vec![T::zero(); g.c_out];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    let mut dcols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * plane }];

    for n in 0..g.batch {
        let xn = &x.data()[n * in_len..(n + 1) * in_len];
        let gy = &grad_out[n * out_len..(n + 1) * out_len];
        for (o, chunk) in gy.chunks(plane).enumerate() {
            db[o] += chunk.iter().copied().sum();
        }
        let gmat = MatRef::new(gy, g.c_out, plane);
        // dW += dY * cols^T
        if g.is_pointwise() {
            gemm(gmat, MatRef::t(xn, plane, k), T::one(), &mut dw);
        } else {
            im2col(xn, &g, &mut cols);
            gemm(gmat, MatRef::t(&cols, plane, k), T::one(), &mut dw);
        }
        // dcols = W^T * dY
        let wt = MatRef::t(weight.data(), k, g.c_out);
        let dxn = &mut dx[n * in_len..(n + 1) * in_len];
        if g.is_pointwise() {
            gemm(wt, gmat, T::one(), dxn);
        } else {
            gemm(wt, gmat, T::zero(), &mut dcols);
            col2im(&dcols, &g, dxn);
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}
