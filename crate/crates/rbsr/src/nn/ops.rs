//! Layer primitives and their backward rules.
//!
//! `conv2d` here is cross-correlation (no kernel flip), the usual network
//! convention. The degradation model's `convolve2d` flips; the two must not
//! be confused.

use rayon::prelude::*;

use crate::error::{RbsrError, Result};
use crate::nn::tensor::{Scalar, Tensor4};

/// Output spatial size of a convolution. Floors the stride remainder, the
/// standard convention; errors only when no output pixel fits.
fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if input + 2 * pad < k {
        return Err(RbsrError::Shape(format!(
            "conv input {input} (+2*{pad} pad) smaller than kernel {k}"
        )));
    }
    Ok((input + 2 * pad - k) / stride + 1)
}

/// Cross-correlation with zero padding. `w` is [outC, inC, kh, kw], `b` has
/// one entry per output channel.
pub fn conv2d<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: &[T],
    stride: usize,
    pad: usize,
) -> Result<Tensor4<T>> {
    let (n, ic, ih, iw) = x.shape();
    let (oc, wic, kh, kw) = w.shape();
    if ic != wic {
        return Err(RbsrError::Shape(format!(
            "conv2d channel mismatch: input {ic}, weight expects {wic}"
        )));
    }
    if b.len() != oc {
        return Err(RbsrError::Shape(format!(
            "conv2d bias length {} != out channels {oc}",
            b.len()
        )));
    }
    let oh = conv_out_size(ih, kh, stride, pad)?;
    let ow = conv_out_size(iw, kw, stride, pad)?;

    let mut out = Tensor4::zeros(n, oc, oh, ow);
    let plane = oh * ow;
    // Each (n, oc) output plane is written by exactly one task; the tap order
    // inside a plane is fixed, so results do not depend on scheduling.
    out.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let ni = idx / oc;
            let oci = idx % oc;
            dst.iter_mut().for_each(|v| *v = b[oci]);
            for ici in 0..ic {
                let xp = x.plane(ni, ici);
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wv = w.at(oci, ici, khi, kwi);
                        if wv == T::zero() {
                            continue;
                        }
                        if stride == 1 {
                            // ihh = ohh + khi - pad, iww = oww + kwi - pad
                            for ohh in 0..oh {
                                let ihh = ohh + khi;
                                if ihh < pad || ihh - pad >= ih {
                                    continue;
                                }
                                let ihh = ihh - pad;
                                let lo = pad.saturating_sub(kwi);
                                let hi = (iw + pad - kwi).min(ow);
                                let xrow = &xp[ihh * iw..(ihh + 1) * iw];
                                let drow = &mut dst[ohh * ow..(ohh + 1) * ow];
                                for oww in lo..hi {
                                    drow[oww] += wv * xrow[oww + kwi - pad];
                                }
                            }
                        } else {
                            for ohh in 0..oh {
                                let ihh = ohh * stride + khi;
                                if ihh < pad || ihh - pad >= ih {
                                    continue;
                                }
                                let xrow = &xp[(ihh - pad) * iw..(ihh - pad + 1) * iw];
                                for oww in 0..ow {
                                    let iww = oww * stride + kwi;
                                    if iww < pad || iww - pad >= iw {
                                        continue;
                                    }
                                    dst[ohh * ow + oww] += wv * xrow[iww - pad];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of `conv2d` w.r.t. input, weight, and bias.
pub fn conv2d_grad<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    dy: &Tensor4<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor4<T>, Tensor4<T>, Vec<T>)> {
    let (n, ic, ih, iw) = x.shape();
    let (oc, _, kh, kw) = w.shape();
    let (dn, doc, oh, ow) = dy.shape();
    if dn != n || doc != oc {
        return Err(RbsrError::Shape(format!(
            "conv2d_grad dy shape ({dn},{doc},..) vs expected ({n},{oc},..)"
        )));
    }

    // db: sum of dy over n, h, w per output channel.
    let mut db = vec![T::zero(); oc];
    for ni in 0..n {
        for oci in 0..oc {
            let mut s = T::zero();
            for &v in dy.plane(ni, oci) {
                s += v;
            }
            db[oci] += s;
        }
    }

    // dx, gather form: one task per (n, ic) input plane.
    let mut dx = Tensor4::zeros(n, ic, ih, iw);
    let iplane = ih * iw;
    dx.data
        .par_chunks_mut(iplane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let ni = idx / ic;
            let ici = idx % ic;
            for oci in 0..oc {
                let dyp = dy.plane(ni, oci);
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wv = w.at(oci, ici, khi, kwi);
                        if wv == T::zero() {
                            continue;
                        }
                        if stride == 1 {
                            // ohh = ihh + pad - khi, oww = iww + pad - kwi must be in range
                            for ihh in 0..ih {
                                let ohh = ihh + pad;
                                if ohh < khi || ohh - khi >= oh {
                                    continue;
                                }
                                let ohh = ohh - khi;
                                let lo = kwi.saturating_sub(pad);
                                let hi = (ow + kwi).saturating_sub(pad).min(iw);
                                let dyrow = &dyp[ohh * ow..(ohh + 1) * ow];
                                let drow = &mut dst[ihh * iw..(ihh + 1) * iw];
                                for iww in lo..hi {
                                    drow[iww] += wv * dyrow[iww + pad - kwi];
                                }
                            }
                        } else {
                            for ihh in 0..ih {
                                let num = ihh + pad;
                                if num < khi || (num - khi) % stride != 0 {
                                    continue;
                                }
                                let ohh = (num - khi) / stride;
                                if ohh >= oh {
                                    continue;
                                }
                                for iww in 0..iw {
                                    let num = iww + pad;
                                    if num < kwi || (num - kwi) % stride != 0 {
                                        continue;
                                    }
                                    let oww = (num - kwi) / stride;
                                    if oww >= ow {
                                        continue;
                                    }
                                    dst[ihh * iw + iww] += wv * dyp[ohh * ow + oww];
                                }
                            }
                        }
                    }
                }
            }
        });

    // dw: per-batch-item partials in parallel, then a fixed-order reduction.
    let partials: Vec<Tensor4<T>> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let mut dw = Tensor4::zeros(oc, ic, kh, kw);
            for oci in 0..oc {
                let dyp = dy.plane(ni, oci);
                for ici in 0..ic {
                    let xp = x.plane(ni, ici);
                    for khi in 0..kh {
                        for kwi in 0..kw {
                            let mut acc = T::zero();
                            for ohh in 0..oh {
                                let ihh = ohh * stride + khi;
                                if ihh < pad || ihh - pad >= ih {
                                    continue;
                                }
                                let xrow = &xp[(ihh - pad) * iw..(ihh - pad + 1) * iw];
                                let dyrow = &dyp[ohh * ow..(ohh + 1) * ow];
                                if stride == 1 {
                                    let lo = pad.saturating_sub(kwi);
                                    let hi = (iw + pad - kwi).min(ow);
                                    for oww in lo..hi {
                                        acc += dyrow[oww] * xrow[oww + kwi - pad];
                                    }
                                } else {
                                    for oww in 0..ow {
                                        let iww = oww * stride + kwi;
                                        if iww < pad || iww - pad >= iw {
                                            continue;
                                        }
                                        acc += dyrow[oww] * xrow[iww - pad];
                                    }
                                }
                            }
                            *dw.at_mut(oci, ici, khi, kwi) += acc;
                        }
                    }
                }
            }
            dw
        })
        .collect();
    let mut dw = Tensor4::zeros(oc, ic, kh, kw);
    for p in &partials {
        dw.add_assign(p);
    }

    Ok((dx, dw, db))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn activation<T: Scalar>(x: &Tensor4<T>, kind: Activation) -> Tensor4<T> {
    match kind {
        Activation::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        Activation::Sigmoid => x.map(|v| T::one() / (T::one() + (-v).exp())),
    }
}

/// d activation / dx, given the forward input and upstream gradient.
pub fn activation_grad<T: Scalar>(x: &Tensor4<T>, dy: &Tensor4<T>, kind: Activation) -> Tensor4<T> {
    assert_eq!(x.shape(), dy.shape(), "activation_grad shape");
    let data = match kind {
        Activation::Relu => x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&xv, &dv)| if xv > T::zero() { dv } else { T::zero() })
            .collect(),
        Activation::Sigmoid => x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&xv, &dv)| {
                let s = T::one() / (T::one() + (-xv).exp());
                s * (T::one() - s) * dv
            })
            .collect(),
    };
    Tensor4::new(x.n, x.c, x.h, x.w, data)
}

/// Dense layer on flattened batches: x is [n, k, 1, 1], w is [out, k, 1, 1],
/// y = x W^T + b as [n, out, 1, 1].
pub fn dense<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, b: &[T]) -> Result<Tensor4<T>> {
    let (n, k, xh, xw) = x.shape();
    let (out, wk, _, _) = w.shape();
    if xh != 1 || xw != 1 {
        return Err(RbsrError::Shape("dense input must be flattened".into()));
    }
    if k != wk {
        return Err(RbsrError::Shape(format!(
            "dense width mismatch: input {k}, weight expects {wk}"
        )));
    }
    if b.len() != out {
        return Err(RbsrError::Shape(format!(
            "dense bias length {} != out {out}",
            b.len()
        )));
    }
    let mut y = Tensor4::zeros(n, out, 1, 1);
    for ni in 0..n {
        let xrow = &x.data[ni * k..(ni + 1) * k];
        for o in 0..out {
            let wrow = &w.data[o * k..(o + 1) * k];
            let mut acc = b[o];
            for i in 0..k {
                acc += xrow[i] * wrow[i];
            }
            y.data[ni * out + o] = acc;
        }
    }
    Ok(y)
}

pub fn dense_grad<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    dy: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>, Vec<T>)> {
    let (n, k, _, _) = x.shape();
    let (out, _, _, _) = w.shape();
    if dy.shape() != (n, out, 1, 1) {
        return Err(RbsrError::Shape("dense_grad dy shape".into()));
    }
    let mut dx = Tensor4::zeros(n, k, 1, 1);
    let mut dw = Tensor4::zeros(out, k, 1, 1);
    let mut db = vec![T::zero(); out];
    for ni in 0..n {
        let xrow = &x.data[ni * k..(ni + 1) * k];
        let dyrow = &dy.data[ni * out..(ni + 1) * out];
        for o in 0..out {
            let g = dyrow[o];
            db[o] += g;
            let wrow = &w.data[o * k..(o + 1) * k];
            let dxrow = &mut dx.data[ni * k..(ni + 1) * k];
            for i in 0..k {
                dxrow[i] += g * wrow[i];
            }
            let dwrow = &mut dw.data[o * k..(o + 1) * k];
            for i in 0..k {
                dwrow[i] += g * xrow[i];
            }
        }
    }
    Ok((dx, dw, db))
}

/// Rearrange r^2 channel groups into an r-times upscaled map:
/// out[n][c][h*r+dy][w*r+dx] = in[n][c*r^2 + dy*r + dx][h][w].
pub fn pixel_shuffle<T: Scalar>(x: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    let (n, c, h, w) = x.shape();
    if r == 0 || c % (r * r) != 0 {
        return Err(RbsrError::Shape(format!(
            "pixel_shuffle: {c} channels not divisible by {r}^2"
        )));
    }
    let oc = c / (r * r);
    let mut out = Tensor4::zeros(n, oc, h * r, w * r);
    for ni in 0..n {
        for oci in 0..oc {
            for dy in 0..r {
                for dx in 0..r {
                    let src = x.plane(ni, oci * r * r + dy * r + dx);
                    let dst = out.plane_mut(ni, oci);
                    for hh in 0..h {
                        for ww in 0..w {
                            dst[(hh * r + dy) * (w * r) + ww * r + dx] = src[hh * w + ww];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of `pixel_shuffle`; also its gradient.
pub fn pixel_unshuffle<T: Scalar>(y: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    let (n, oc, oh, ow) = y.shape();
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(RbsrError::Shape(format!(
            "pixel_unshuffle: spatial dims ({oh},{ow}) not divisible by {r}"
        )));
    }
    let (h, w) = (oh / r, ow / r);
    let mut out = Tensor4::zeros(n, oc * r * r, h, w);
    for ni in 0..n {
        for oci in 0..oc {
            let src = y.plane(ni, oci);
            for dy in 0..r {
                for dx in 0..r {
                    let dst = out.plane_mut(ni, oci * r * r + dy * r + dx);
                    for hh in 0..h {
                        for ww in 0..w {
                            dst[hh * w + ww] = src[(hh * r + dy) * ow + ww * r + dx];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
