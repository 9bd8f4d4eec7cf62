//! Forward and backward kernels for NCHW tensors.
//!
//! Work is split across rayon tasks by output plane; each task sums in a
//! fixed order, so results do not depend on the thread count.

use rayon::prelude::*;

use super::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

pub fn conv_out_len(len: usize, k: usize, g: ConvGeometry) -> usize {
    assert!(len + 2 * g.pad >= k, "kernel larger than padded input");
    (len + 2 * g.pad - k) / g.stride + 1
}

/// Output positions `o` in `[0, out_len)` whose tap `o * stride + k - pad`
/// lands inside `[0, in_len)`.
#[inline]
fn valid_outputs(out_len: usize, in_len: usize, k: usize, g: ConvGeometry) -> (usize, usize) {
    let (s, p) = (g.stride as isize, g.pad as isize);
    let k = k as isize;
    // o * s + k - p >= 0  and  o * s + k - p <= in_len - 1
    let lo = ((p - k).max(0) + s - 1) / s;
    let hi_num = in_len as isize - 1 + p - k;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num / s + 1).min(out_len as isize);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

/// `out[n, co] = bias[co] + sum_ci w[co, ci] * in[n, ci]` (cross-correlation).
pub fn conv2d_forward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, g: ConvGeometry) -> Tensor<T> {
    let (n, ci_n, h, w) = input.dims4();
    let ws = weight.shape();
    assert_eq!(ws.len(), 4, "conv weight must be rank 4");
    let (co_n, wci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(wci, ci_n, "conv input channels {ci_n} do not match weight {wci}");
    assert_eq!(bias.len(), co_n, "bias length must equal output channels");
    let oh = conv_out_len(h, kh, g);
    let ow = conv_out_len(w, kw, g);
    let mut out = vec![T::zero(); n * co_n * oh * ow];
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, o)| {
        let (ni, co) = (plane / co_n, plane % co_n);
        o.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..ci_n {
            let xin = &x[(ni * ci_n + ci) * h * w..(ni * ci_n + ci + 1) * h * w];
            for ky in 0..kh {
                let (oy0, oy1) = valid_outputs(oh, h, ky, g);
                for kx in 0..kw {
                    let wv = wt[((co * ci_n + ci) * kh + ky) * kw + kx];
                    let (ox0, ox1) = valid_outputs(ow, w, kx, g);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let orow = &mut o[oy * ow..(oy + 1) * ow];
                        let irow = &xin[iy * w..(iy + 1) * w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            let len = ox1 - ox0;
                            for (ov, &iv) in orow[ox0..ox1].iter_mut().zip(&irow[ix0..ix0 + len]) {
                                *ov = *ov + wv * iv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kx - g.pad;
                                orow[ox] = orow[ox] + wv * irow[ix];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![n, co_n, oh, ow], out)
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: ConvGeometry,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, ci_n, h, w) = input.dims4();
    let ws = weight.shape();
    let (co_n, kh, kw) = (ws[0], ws[2], ws[3]);
    let (_, _, oh, ow) = grad_out.dims4();
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();

    let mut gin = vec![T::zero(); n * ci_n * h * w];
    gin.par_chunks_mut(h * w).enumerate().for_each(|(plane, gi)| {
        let (ni, ci) = (plane / ci_n, plane % ci_n);
        for co in 0..co_n {
            let gplane = &go[(ni * co_n + co) * oh * ow..(ni * co_n + co + 1) * oh * ow];
            for ky in 0..kh {
                let (oy0, oy1) = valid_outputs(oh, h, ky, g);
                for kx in 0..kw {
                    let wv = wt[((co * ci_n + ci) * kh + ky) * kw + kx];
                    let (ox0, ox1) = valid_outputs(ow, w, kx, g);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let irow = &mut gi[iy * w..(iy + 1) * w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            let len = ox1 - ox0;
                            for (iv, &gv) in irow[ix0..ix0 + len].iter_mut().zip(&grow[ox0..ox1]) {
                                *iv = *iv + wv * gv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kx - g.pad;
                                irow[ix] = irow[ix] + wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    });

    let per_co = ci_n * kh * kw;
    let mut gw = vec![T::zero(); co_n * per_co];
    gw.par_chunks_mut(per_co).enumerate().for_each(|(co, gwc)| {
        for ci in 0..ci_n {
            for ky in 0..kh {
                let (oy0, oy1) = valid_outputs(oh, h, ky, g);
                for kx in 0..kw {
                    let (ox0, ox1) = valid_outputs(ow, w, kx, g);
                    let mut acc = T::zero();
                    if ox0 < ox1 {
                        for ni in 0..n {
                            let xin = &x[(ni * ci_n + ci) * h * w..(ni * ci_n + ci + 1) * h * w];
                            let gplane = &go[(ni * co_n + co) * oh * ow..(ni * co_n + co + 1) * oh * ow];
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + ky - g.pad;
                                let grow = &gplane[oy * ow..(oy + 1) * ow];
                                let irow = &xin[iy * w..(iy + 1) * w];
                                if g.stride == 1 {
                                    let ix0 = ox0 + kx - g.pad;
                                    let len = ox1 - ox0;
                                    let mut row_acc = T::zero();
                                    for (&gv, &iv) in grow[ox0..ox1].iter().zip(&irow[ix0..ix0 + len]) {
                                        row_acc = row_acc + gv * iv;
                                    }
                                    acc = acc + row_acc;
                                } else {
                                    for ox in ox0..ox1 {
                                        acc = acc + grow[ox] * irow[ox * g.stride + kx - g.pad];
                                    }
                                }
                            }
                        }
                    }
                    gwc[(ci * kh + ky) * kw + kx] = acc;
                }
            }
        }
    });

    let mut gb = vec![T::zero(); co_n];
    for ni in 0..n {
        for (co, b) in gb.iter_mut().enumerate() {
            let gplane = &go[(ni * co_n + co) * oh * ow..(ni * co_n + co + 1) * oh * ow];
            *b = *b + gplane.iter().copied().sum::<T>();
        }
    }

    (
        Tensor::new(input.shape().to_vec(), gin),
        Tensor::new(weight.shape().to_vec(), gw),
        Tensor::new(vec![co_n], gb),
    )
}

/// 2x2 max pooling with stride 2; also returns the flat input index of each
/// maximum (first in raster order on ties).
pub fn maxpool2_forward<T: Real>(input: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let (n, c, h, w) = input.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "max-pool needs even spatial extents, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (Tensor::new(vec![n, c, oh, ow], out), arg)
}

pub fn maxpool2_backward<T: Real>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape.to_vec());
    let gd = g.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        gd[i] = gd[i] + v;
    }
    g
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = input.dims4();
    let x = input.data();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for oy in 0..oh {
            let row = &x[plane * h * w + (oy / 2) * w..plane * h * w + (oy / 2 + 1) * w];
            for ox in 0..ow {
                out.push(row[ox / 2]);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn upsample2_backward<T: Real>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (n, c, oh, ow) = grad_out.dims4();
    let (h, w) = (oh / 2, ow / 2);
    let go = grad_out.data();
    let mut g = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let i = plane * h * w + (oy / 2) * w + ox / 2;
                g[i] = g[i] + go[plane * oh * ow + oy * ow + ox];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], g)
}

/// Channel concatenation of two NCHW tensors.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, ca, h, w) = a.dims4();
    let (nb, cb, hb, wb) = b.dims4();
    assert_eq!((n, h, w), (nb, hb, wb), "concat needs matching N, H, W");
    let hw = h * w;
    let mut out = Vec::with_capacity(n * (ca + cb) * hw);
    for ni in 0..n {
        out.extend_from_slice(&a.data()[ni * ca * hw..(ni + 1) * ca * hw]);
        out.extend_from_slice(&b.data()[ni * cb * hw..(ni + 1) * cb * hw]);
    }
    Tensor::new(vec![n, ca + cb, h, w], out)
}

pub fn split_channels<T: Real>(grad: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = grad.dims4();
    let cb = c - ca;
    let hw = h * w;
    let mut a = Vec::with_capacity(n * ca * hw);
    let mut b = Vec::with_capacity(n * cb * hw);
    for ni in 0..n {
        let base = ni * c * hw;
        a.extend_from_slice(&grad.data()[base..base + ca * hw]);
        b.extend_from_slice(&grad.data()[base + ca * hw..base + c * hw]);
    }
    (Tensor::new(vec![n, ca, h, w], a), Tensor::new(vec![n, cb, h, w], b))
}
