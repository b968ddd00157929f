//! 2-D convolution (cross-correlation, as in most NN frameworks) with a
//! naive loop path and an im2col + GEMM path.

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Which convolution implementation the tape uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvAlgo {
    /// Direct nested loops. Slow, used as the reference.
    Naive,
    /// Patch-matrix lowering followed by a matrix product.
    #[default]
    Im2col,
}

/// Output extent along one axis, or `None` when the kernel does not fit.
pub fn conv2d_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

pub(crate) fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    let [n, c, h, w] = input.dims4("conv2d")?;
    let [f, wc, kh, kw] = weight.dims4("conv2d")?;
    if wc != c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels but filters expect {wc}"),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Config(format!("conv2d kernel {kh}x{kw} must be odd")));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    if bias.shape() != [f] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?} does not match {f} filters", bias.shape()),
        ));
    }
    let ho = conv2d_output_size(h, kh, stride, padding);
    let wo = conv2d_output_size(w, kw, stride, padding);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok(ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad: padding,
        }),
        _ => Err(Error::shape(
            "conv2d",
            format!("{kh}x{kw} kernel does not fit {h}x{w} input with padding {padding}"),
        )),
    }
}

/// Reference convolution by direct summation.
pub fn conv2d_naive<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, weight, bias, stride, padding)?;
    Ok(naive_forward(&g, input.data(), weight.data(), bias.data()))
}

pub(crate) fn forward<T: Scalar>(
    algo: ConvAlgo,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, weight, bias, stride, padding)?;
    Ok(match algo {
        ConvAlgo::Naive => naive_forward(&g, input.data(), weight.data(), bias.data()),
        ConvAlgo::Im2col => im2col_forward(&g, input.data(), weight.data(), bias.data()),
    })
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub(crate) fn backward<T: Scalar>(
    algo: ConvAlgo,
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let (gx, gw, gb) = match algo {
        ConvAlgo::Naive => naive_backward(g, input, weight, grad_out, need_input),
        ConvAlgo::Im2col => im2col_backward(g, input, weight, grad_out, need_input),
    };
    ConvGrads {
        input: gx.map(|d| Tensor {
            shape: vec![g.n, g.c, g.h, g.w],
            data: d,
        }),
        weight: Tensor {
            shape: vec![g.f, g.c, g.kh, g.kw],
            data: gw,
        },
        bias: Tensor {
            shape: vec![g.f],
            data: gb,
        },
    }
}

#[inline]
fn src_index(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
    let pos = (o * stride + k) as isize - pad as isize;
    (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
}

fn naive_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Tensor<T> {
    let mut out = vec![T::zero(); g.n * g.f * g.out_plane()];
    for n in 0..g.n {
        for f in 0..g.f {
            for oh in 0..g.ho {
                for ow in 0..g.wo {
                    let mut acc = b[f];
                    for c in 0..g.c {
                        for ki in 0..g.kh {
                            let Some(ih) = src_index(oh, ki, g.stride, g.pad, g.h) else {
                                continue;
                            };
                            for kj in 0..g.kw {
                                let Some(iw) = src_index(ow, kj, g.stride, g.pad, g.w) else {
                                    continue;
                                };
                                acc += w[((f * g.c + c) * g.kh + ki) * g.kw + kj]
                                    * x[((n * g.c + c) * g.h + ih) * g.w + iw];
                            }
                        }
                    }
                    out[((n * g.f + f) * g.ho + oh) * g.wo + ow] = acc;
                }
            }
        }
    }
    Tensor {
        shape: vec![g.n, g.f, g.ho, g.wo],
        data: out,
    }
}

#[allow(clippy::type_complexity)]
fn naive_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gy: &[T],
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); if need_input { x.len() } else { 0 }];
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); g.f];
    for n in 0..g.n {
        for f in 0..g.f {
            for oh in 0..g.ho {
                for ow in 0..g.wo {
                    let go = gy[((n * g.f + f) * g.ho + oh) * g.wo + ow];
                    gb[f] += go;
                    for c in 0..g.c {
                        for ki in 0..g.kh {
                            let Some(ih) = src_index(oh, ki, g.stride, g.pad, g.h) else {
                                continue;
                            };
                            for kj in 0..g.kw {
                                let Some(iw) = src_index(ow, kj, g.stride, g.pad, g.w) else {
                                    continue;
                                };
                                let wi = ((f * g.c + c) * g.kh + ki) * g.kw + kj;
                                let xi = ((n * g.c + c) * g.h + ih) * g.w + iw;
                                gw[wi] += go * x[xi];
                                if need_input {
                                    gx[xi] += go * w[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (need_input.then_some(gx), gw, gb)
}

/// Lower one C×H×W sample into a (C·Kh·Kw)×(Ho·Wo) patch matrix.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * plane..(row + 1) * plane];
                for oh in 0..g.ho {
                    let dst = &mut dst_row[oh * g.wo..(oh + 1) * g.wo];
                    let Some(ih) = src_index(oh, ki, g.stride, g.pad, g.h) else {
                        dst.fill(T::zero());
                        continue;
                    };
                    let src = &x[(c * g.h + ih) * g.w..(c * g.h + ih + 1) * g.w];
                    if g.stride == 1 {
                        // valid ow satisfy 0 <= ow + kj - pad < w
                        let lo = g.pad.saturating_sub(kj).min(g.wo);
                        let hi = (g.w + g.pad).saturating_sub(kj).clamp(lo, g.wo);
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if hi > lo {
                            let start = lo + kj - g.pad;
                            dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                    } else {
                        for (ow, d) in dst.iter_mut().enumerate() {
                            *d = src_index(ow, kj, g.stride, g.pad, g.w)
                                .map_or(T::zero(), |iw| src[iw]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto a sample.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * plane..(row + 1) * plane];
                for oh in 0..g.ho {
                    let Some(ih) = src_index(oh, ki, g.stride, g.pad, g.h) else {
                        continue;
                    };
                    let src = &src_row[oh * g.wo..(oh + 1) * g.wo];
                    let dst = &mut x[(c * g.h + ih) * g.w..(c * g.h + ih + 1) * g.w];
                    if g.stride == 1 {
                        let lo = g.pad.saturating_sub(kj).min(g.wo);
                        let hi = (g.w + g.pad).saturating_sub(kj).clamp(lo, g.wo);
                        if hi > lo {
                            let start = lo + kj - g.pad;
                            for (d, &s) in dst[start..start + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                *d += s;
                            }
                        }
                    } else {
                        for (ow, &s) in src.iter().enumerate() {
                            if let Some(iw) = src_index(ow, kj, g.stride, g.pad, g.w) {
                                dst[iw] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Tensor<T> {
    let in_sample = g.c * g.h * g.w;
    let out_sample = g.f * g.out_plane();
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut out = vec![T::zero(); g.n * out_sample];
    out.par_chunks_mut(out_sample.max(1))
        .enumerate()
        .for_each(|(n, out_n)| {
            let mut cols = vec![T::zero(); patch * plane];
            im2col(g, &x[n * in_sample..(n + 1) * in_sample], &mut cols);
            for (f, row) in out_n.chunks_mut(plane).enumerate() {
                row.fill(b[f]);
            }
            T::gemm(
                g.f,
                patch,
                plane,
                T::one(),
                w,
                (patch as isize, 1),
                &cols,
                (plane as isize, 1),
                T::one(),
                out_n,
                (plane as isize, 1),
            );
        });
    Tensor {
        shape: vec![g.n, g.f, g.ho, g.wo],
        data: out,
    }
}

#[allow(clippy::type_complexity)]
fn im2col_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gy: &[T],
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let in_sample = g.c * g.h * g.w;
    let out_sample = g.f * g.out_plane();
    let plane = g.out_plane();
    let patch = g.patch_len();

    // Per-sample partial weight gradients, reduced in sample order so the
    // result does not depend on thread scheduling.
    let partials: Vec<(Vec<T>, Option<Vec<T>>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let x_n = &x[n * in_sample..(n + 1) * in_sample];
            let gy_n = &gy[n * out_sample..(n + 1) * out_sample];
            let mut cols = vec![T::zero(); patch * plane];
            im2col(g, x_n, &mut cols);
            let mut gw = vec![T::zero(); w.len()];
            // gw (F×P) = gy_n (F×HW) · colsᵀ (HW×P)
            T::gemm(
                g.f,
                plane,
                patch,
                T::one(),
                gy_n,
                (plane as isize, 1),
                &cols,
                (1, plane as isize),
                T::zero(),
                &mut gw,
                (patch as isize, 1),
            );
            let gx = need_input.then(|| {
                // dcols (P×HW) = wᵀ (P×F) · gy_n (F×HW)
                T::gemm(
                    patch,
                    g.f,
                    plane,
                    T::one(),
                    w,
                    (1, patch as isize),
                    gy_n,
                    (plane as isize, 1),
                    T::zero(),
                    &mut cols,
                    (plane as isize, 1),
                );
                let mut gx = vec![T::zero(); in_sample];
                col2im(g, &cols, &mut gx);
                gx
            });
            (gw, gx)
        })
        .collect();

    let mut gw = vec![T::zero(); w.len()];
    let mut gx = need_input.then(|| Vec::with_capacity(x.len()));
    for (pw, px) in partials {
        for (a, b) in gw.iter_mut().zip(pw) {
            *a += b;
        }
        if let (Some(all), Some(px)) = (gx.as_mut(), px) {
            all.extend(px);
        }
    }
    let mut gb = vec![T::zero(); g.f];
    for n in 0..g.n {
        for (f, acc) in gb.iter_mut().enumerate() {
            let row = &gy[n * out_sample + f * plane..n * out_sample + (f + 1) * plane];
            *acc += row.iter().copied().sum::<T>();
        }
    }
    (gx, gw, gb)
}
