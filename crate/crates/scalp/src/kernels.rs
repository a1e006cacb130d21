//! Low-level numeric kernels behind the tape primitives.
//!
//! Forward evaluation and both backward sweeps share these routines, so a
//! primitive and the ops that express its derivative always agree on the
//! arithmetic.

use crate::tensor::Tensor;

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = ad[i * k + l];
            let brow = &bd[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

pub(crate) fn conv2d_out_dim(x: usize, k: usize, stride: usize, pad: usize) -> usize {
    (x + 2 * pad - k) / stride + 1
}

/// Valid output range along one spatial axis for kernel offset `u`:
/// indices `o` with `0 <= o*stride + u - pad < extent`.
fn conv_span(extent: usize, out: usize, stride: usize, pad: usize, u: usize) -> (usize, usize) {
    let lo = if pad > u { (pad - u + stride - 1) / stride } else { 0 };
    let hi_num = extent + pad;
    if hi_num <= u {
        return (1, 0); // empty
    }
    let hi = ((hi_num - 1 - u) / stride).min(out.saturating_sub(1));
    (lo, hi)
}

/// 2-D cross-correlation with zero padding.
/// `x`: `[cin, xh, xw]`, `k`: `[cout, cin, kh, kw]` -> `[cout, oh, ow]`.
pub(crate) fn conv2d(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, xh, xw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = conv2d_out_dim(xh, kh, stride, pad);
    let ow = conv2d_out_dim(xw, kw, stride, pad);
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        let obase = o * oh * ow;
        for c in 0..cin {
            let xbase = c * xh * xw;
            for u in 0..kh {
                let (oy_lo, oy_hi) = conv_span(xh, oh, stride, pad, u);
                if oy_lo > oy_hi {
                    continue;
                }
                for v in 0..kw {
                    let w = kd[((o * cin + c) * kh + u) * kw + v];
                    let (ox_lo, ox_hi) = conv_span(xw, ow, stride, pad, v);
                    if ox_lo > ox_hi {
                        continue;
                    }
                    for oy in oy_lo..=oy_hi {
                        let iy = oy * stride + u - pad;
                        let xrow = xbase + iy * xw;
                        let orow = obase + oy * ow;
                        for ox in ox_lo..=ox_hi {
                            let ix = ox * stride + v - pad;
                            out[orow + ox] += w * xd[xrow + ix];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out).unwrap()
}

/// Adjoint of [`conv2d`] with respect to its input.
/// `gy`: `[cout, oh, ow]` -> `[cin, xh, xw]`.
pub(crate) fn conv2d_input_grad(
    gy: &Tensor,
    k: &Tensor,
    stride: usize,
    pad: usize,
    xh: usize,
    xw: usize,
) -> Tensor {
    let (cout, oh, ow) = (gy.shape()[0], gy.shape()[1], gy.shape()[2]);
    let (cin, kh, kw) = (k.shape()[1], k.shape()[2], k.shape()[3]);
    let gd = gy.data();
    let kd = k.data();
    let mut dx = vec![0.0; cin * xh * xw];
    for o in 0..cout {
        let gbase = o * oh * ow;
        for c in 0..cin {
            let xbase = c * xh * xw;
            for u in 0..kh {
                let (oy_lo, oy_hi) = conv_span(xh, oh, stride, pad, u);
                if oy_lo > oy_hi {
                    continue;
                }
                for v in 0..kw {
                    let w = kd[((o * cin + c) * kh + u) * kw + v];
                    let (ox_lo, ox_hi) = conv_span(xw, ow, stride, pad, v);
                    if ox_lo > ox_hi {
                        continue;
                    }
                    for oy in oy_lo..=oy_hi {
                        let iy = oy * stride + u - pad;
                        let xrow = xbase + iy * xw;
                        let grow = gbase + oy * ow;
                        for ox in ox_lo..=ox_hi {
                            let ix = ox * stride + v - pad;
                            dx[xrow + ix] += w * gd[grow + ox];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cin, xh, xw], dx).unwrap()
}

/// Adjoint of [`conv2d`] with respect to its kernel.
/// `x`: `[cin, xh, xw]`, `gy`: `[cout, oh, ow]` -> `[cout, cin, kh, kw]`.
pub(crate) fn conv2d_kernel_grad(
    x: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Tensor {
    let (cin, xh, xw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, oh, ow) = (gy.shape()[0], gy.shape()[1], gy.shape()[2]);
    let xd = x.data();
    let gd = gy.data();
    let mut dk = vec![0.0; cout * cin * kh * kw];
    for o in 0..cout {
        let gbase = o * oh * ow;
        for c in 0..cin {
            let xbase = c * xh * xw;
            for u in 0..kh {
                let (oy_lo, oy_hi) = conv_span(xh, oh, stride, pad, u);
                if oy_lo > oy_hi {
                    continue;
                }
                for v in 0..kw {
                    let (ox_lo, ox_hi) = conv_span(xw, ow, stride, pad, v);
                    if ox_lo > ox_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in oy_lo..=oy_hi {
                        let iy = oy * stride + u - pad;
                        let xrow = xbase + iy * xw;
                        let grow = gbase + oy * ow;
                        for ox in ox_lo..=ox_hi {
                            let ix = ox * stride + v - pad;
                            acc += gd[grow + ox] * xd[xrow + ix];
                        }
                    }
                    dk[((o * cin + c) * kh + u) * kw + v] = acc;
                }
            }
        }
    }
    Tensor::new(vec![cout, cin, kh, kw], dk).unwrap()
}

/// (outer, len, inner) decomposition around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

pub(crate) fn sum_axis(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let base = (o * len + l) * inner;
            let obase = o * inner;
            for i in 0..inner {
                out[obase + i] += xd[base + i];
            }
        }
    }
    Tensor::new(drop_axis(x.shape(), axis), out).unwrap()
}

pub(crate) fn max_axis(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![f64::NEG_INFINITY; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let base = (o * len + l) * inner;
            let obase = o * inner;
            for i in 0..inner {
                let v = xd[base + i];
                if v > out[obase + i] {
                    out[obase + i] = v;
                }
            }
        }
    }
    Tensor::new(drop_axis(x.shape(), axis), out).unwrap()
}

/// Indicator of the first maximum along `axis`; same shape as `x`.
pub(crate) fn max_mask(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut mask = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for l in 0..len {
                let v = xd[(o * len + l) * inner + i];
                if v > best {
                    best = v;
                    arg = l;
                }
            }
            mask[(o * len + arg) * inner + i] = 1.0;
        }
    }
    Tensor::new(x.shape().to_vec(), mask).unwrap()
}

/// Insert a new axis of length `n` at position `axis`, repeating the data.
pub(crate) fn repeat_axis(x: &Tensor, axis: usize, n: usize) -> Tensor {
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis..].iter().product();
    let xd = x.data();
    let mut out = vec![0.0; outer * n * inner];
    for o in 0..outer {
        let src = &xd[o * inner..(o + 1) * inner];
        for r in 0..n {
            let dst = (o * n + r) * inner;
            out[dst..dst + inner].copy_from_slice(src);
        }
    }
    let mut shape = x.shape().to_vec();
    shape.insert(axis, n);
    Tensor::new(shape, out).unwrap()
}

pub(crate) fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    let in_strides = x.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let xd = x.data();
    let rank = perm.len();
    let mut out = vec![0.0; xd.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut off = 0;
        for a in 0..rank {
            off += idx[a] * in_strides[perm[a]];
        }
        *slot = xd[off];
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Tensor::new(out_shape, out).unwrap()
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (a, &p) in perm.iter().enumerate() {
        inv[p] = a;
    }
    inv
}

pub(crate) fn concat(xs: &[&Tensor], axis: usize) -> Tensor {
    let mut out_shape = xs[0].shape().to_vec();
    out_shape[axis] = xs.iter().map(|t| t.shape()[axis]).sum();
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let total = out_shape.iter().product();
    let mut out = vec![0.0; total];
    let out_block = out_shape[axis] * inner;
    for o in 0..outer {
        let mut at = 0;
        for t in xs {
            let blk = t.shape()[axis] * inner;
            let src = &t.data()[o * blk..(o + 1) * blk];
            let dst = o * out_block + at;
            out[dst..dst + blk].copy_from_slice(src);
            at += blk;
        }
    }
    Tensor::new(out_shape, out).unwrap()
}

pub(crate) fn slice_axis(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, full, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        let src = (o * full + start) * inner;
        let dst = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&xd[src..src + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, out).unwrap()
}

/// Adjoint of [`slice_axis`]: place `g` inside a zero tensor shaped like the
/// slice's source.
pub(crate) fn embed_axis(g: &Tensor, axis: usize, start: usize, full: usize) -> Tensor {
    let (outer, len, inner) = axis_split(g.shape(), axis);
    let gd = g.data();
    let mut out = vec![0.0; outer * full * inner];
    for o in 0..outer {
        let dst = (o * full + start) * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
    }
    let mut shape = g.shape().to_vec();
    shape[axis] = full;
    Tensor::new(shape, out).unwrap()
}

/// Sample positions for one axis of an align-corners-false bilinear resize.
/// Returns `(i0, i1, frac)` per target index.
pub(crate) fn bilinear_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let mut s = (i as f64 + 0.5) * scale - 0.5;
            if s < 0.0 {
                s = 0.0;
            }
            let max = (src - 1) as f64;
            if s > max {
                s = max;
            }
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear upsample of a 2-D tensor to `[th, tw]`, align-corners-false.
pub(crate) fn bilinear_up(x: &Tensor, th: usize, tw: usize) -> Tensor {
    let (sh, sw) = (x.shape()[0], x.shape()[1]);
    let ys = bilinear_axis(sh, th);
    let xs = bilinear_axis(sw, tw);
    let xd = x.data();
    let mut out = vec![0.0; th * tw];
    for (ti, &(y0, y1, dy)) in ys.iter().enumerate() {
        for (tj, &(x0, x1, dx)) in xs.iter().enumerate() {
            let v = (1.0 - dy) * (1.0 - dx) * xd[y0 * sw + x0]
                + (1.0 - dy) * dx * xd[y0 * sw + x1]
                + dy * (1.0 - dx) * xd[y1 * sw + x0]
                + dy * dx * xd[y1 * sw + x1];
            out[ti * tw + tj] = v;
        }
    }
    Tensor::new(vec![th, tw], out).unwrap()
}

/// Adjoint of [`bilinear_up`]: scatter target-grid values back to `[sh, sw]`.
pub(crate) fn bilinear_down_adjoint(g: &Tensor, sh: usize, sw: usize) -> Tensor {
    let (th, tw) = (g.shape()[0], g.shape()[1]);
    let ys = bilinear_axis(sh, th);
    let xs = bilinear_axis(sw, tw);
    let gd = g.data();
    let mut out = vec![0.0; sh * sw];
    for (ti, &(y0, y1, dy)) in ys.iter().enumerate() {
        for (tj, &(x0, x1, dx)) in xs.iter().enumerate() {
            let v = gd[ti * tw + tj];
            out[y0 * sw + x0] += (1.0 - dy) * (1.0 - dx) * v;
            out[y0 * sw + x1] += (1.0 - dy) * dx * v;
            out[y1 * sw + x0] += dy * (1.0 - dx) * v;
            out[y1 * sw + x1] += dy * dx * v;
        }
    }
    Tensor::new(vec![sh, sw], out).unwrap()
}
