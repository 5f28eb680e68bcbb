//! Raw f32 compute kernels shared by the tape ops and the host-side helpers.
//!
//! Everything here is deterministic for any rayon pool size: parallelism only
//! ever splits work across disjoint output slices, each of which is reduced
//! sequentially in index order.

use rayon::prelude::*;

/// Row-major matmul: a is m×k, b is k×n, returns m×n.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

/// Transpose a row-major rows×cols matrix.
pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Output spatial size for 'same' padding: ceil(in / stride).
pub fn conv_out_size(input: usize, stride: usize) -> usize {
    input.div_ceil(stride)
}

/// Valid output range `[lo, hi)` such that `iw = wo*stride + tap - pad` stays in `[0, w)`.
fn tap_range(w: usize, w_out: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    let lo = if tap >= pad {
        0
    } else {
        (pad - tap).div_ceil(stride)
    };
    let hi_excl = (w + pad).saturating_sub(tap); // need wo*stride < w + pad - tap
    let hi = hi_excl.div_ceil(stride).min(w_out);
    (lo.min(hi), hi)
}

/// out[lo..hi] += wv * x[lo + tap - pad ..]; the stride-1 convolution inner
/// loop, written as a slice zip so it vectorizes.
#[inline]
fn saxpy_tap(out: &mut [f32], x: &[f32], wv: f32, lo: usize, hi: usize, tap: usize, pad: usize) {
    if hi <= lo {
        return;
    }
    // tap_range guarantees lo + tap >= pad for stride 1
    let start = (lo + tap) - pad;
    let xs = &x[start..start + (hi - lo)];
    for (o, &xv) in out[lo..hi].iter_mut().zip(xs) {
        *o += wv * xv;
    }
}

/// x[lo + tap - pad ..] += wv * g[lo..hi]; the stride-1 input-gradient inner loop.
#[inline]
fn saxpy_tap_rev(x: &mut [f32], g: &[f32], wv: f32, lo: usize, hi: usize, tap: usize, pad: usize) {
    if hi <= lo {
        return;
    }
    let start = (lo + tap) - pad;
    let xs = &mut x[start..start + (hi - lo)];
    for (o, &gv) in xs.iter_mut().zip(&g[lo..hi]) {
        *o += wv * gv;
    }
}

/// Dot product with eight independent accumulators (fixed summation order,
/// wide enough for SIMD).
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += xa[i] * xb[i];
        }
    }
    let mut s = 0.0f32;
    for v in acc {
        s += v;
    }
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// col[(ic*kh*kw + r*kw + c), (oh*wo + ow)] = x[ic, oh*s + r - ph, ow*s + c - pw]
/// for one sample; out-of-bounds taps are zero.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Vec<f32> {
    let (ph, pw) = (kh / 2, kw / 2);
    let howo = ho * wo;
    let mut col = vec![0.0f32; ci * kh * kw * howo];
    for ic in 0..ci {
        let xbase = ic * h * w;
        for r in 0..kh {
            for c in 0..kw {
                let crow = &mut col[(ic * kh * kw + r * kw + c) * howo..(ic * kh * kw + r * kw + c + 1) * howo];
                for oh in 0..ho {
                    let ih = (oh * stride + r) as isize - ph as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let xrow = &x[xbase + ih as usize * w..xbase + (ih as usize + 1) * w];
                    let (lo, hi) = tap_range(w, wo, stride, c, pw);
                    if stride == 1 {
                        if hi > lo {
                            let start = (lo + c) - pw;
                            crow[oh * wo + lo..oh * wo + hi].copy_from_slice(&xrow[start..start + (hi - lo)]);
                        }
                    } else {
                        for ow in lo..hi {
                            let iw = (ow * stride + c) as isize - pw as isize;
                            crow[oh * wo + ow] = xrow[iw as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the reverse of im2col.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    dcol: &[f32],
    dx: &mut [f32],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) {
    let (ph, pw) = (kh / 2, kw / 2);
    let howo = ho * wo;
    for ic in 0..ci {
        let xbase = ic * h * w;
        for r in 0..kh {
            for c in 0..kw {
                let crow = &dcol[(ic * kh * kw + r * kw + c) * howo..(ic * kh * kw + r * kw + c + 1) * howo];
                for oh in 0..ho {
                    let ih = (oh * stride + r) as isize - ph as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let xrow = &mut dx[xbase + ih as usize * w..xbase + (ih as usize + 1) * w];
                    let (lo, hi) = tap_range(w, wo, stride, c, pw);
                    if stride == 1 {
                        if hi > lo {
                            let start = (lo + c) - pw;
                            for (o, &g) in xrow[start..start + (hi - lo)].iter_mut().zip(&crow[oh * wo + lo..oh * wo + hi]) {
                                *o += g;
                            }
                        }
                    } else {
                        for ow in lo..hi {
                            let iw = (ow * stride + c) as isize - pw as isize;
                            xrow[iw as usize] += crow[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution with 'same' padding (pad = k/2), NCHW layout.
/// x: [n, ci, h, w], weight: [co, ci, kh, kw], bias: optional [co].
pub fn conv2d_forward(
    x: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Vec<f32> {
    let (ho, wo) = (conv_out_size(h, stride), conv_out_size(w, stride));
    let howo = ho * wo;
    let mut out = vec![0.0f32; n * co * howo];
    if kh == 1 && kw == 1 && stride == 1 {
        // pointwise: one full-plane saxpy per input channel
        out.par_chunks_mut(howo).enumerate().for_each(|(idx, plane)| {
            let (ni, oc) = (idx / co, idx % co);
            if let Some(b) = bias {
                plane.fill(b[oc]);
            }
            for ic in 0..ci {
                let wv = weight[oc * ci + ic];
                if wv == 0.0 {
                    continue;
                }
                let xplane = &x[(ni * ci + ic) * howo..(ni * ci + ic + 1) * howo];
                for (o, &xv) in plane.iter_mut().zip(xplane) {
                    *o += wv * xv;
                }
            }
        });
        return out;
    }
    // general case: per-sample im2col followed by W [co, ci*kh*kw] x col
    let ck = ci * kh * kw;
    for ni in 0..n {
        let col = im2col(&x[ni * ci * h * w..(ni + 1) * ci * h * w], ci, h, w, kh, kw, stride, ho, wo);
        let oblock = &mut out[ni * co * howo..(ni + 1) * co * howo];
        oblock.par_chunks_mut(howo).enumerate().for_each(|(oc, plane)| {
            if let Some(b) = bias {
                plane.fill(b[oc]);
            }
            for p in 0..ck {
                let wv = weight[oc * ck + p];
                if wv == 0.0 {
                    continue;
                }
                let crow = &col[p * howo..(p + 1) * howo];
                for (o, &cv) in plane.iter_mut().zip(crow) {
                    *o += wv * cv;
                }
            }
        });
    }
    out
}

/// Gradient of conv2d w.r.t. its input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_x(
    dy: &[f32],
    weight: &[f32],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Vec<f32> {
    let (ho, wo) = (conv_out_size(h, stride), conv_out_size(w, stride));
    let howo = ho * wo;
    let mut dx = vec![0.0f32; n * ci * h * w];
    if kh == 1 && kw == 1 && stride == 1 {
        dx.par_chunks_mut(howo).enumerate().for_each(|(idx, plane)| {
            let (ni, ic) = (idx / ci, idx % ci);
            for oc in 0..co {
                let wv = weight[oc * ci + ic];
                if wv == 0.0 {
                    continue;
                }
                let dyplane = &dy[(ni * co + oc) * howo..(ni * co + oc + 1) * howo];
                for (o, &gv) in plane.iter_mut().zip(dyplane) {
                    *o += wv * gv;
                }
            }
        });
        return dx;
    }
    // dcol = W^T [ck, co] x dy [co, howo], then scatter back to pixels
    let ck = ci * kh * kw;
    for ni in 0..n {
        let mut dcol = vec![0.0f32; ck * howo];
        dcol.par_chunks_mut(howo).enumerate().for_each(|(p, crow)| {
            for oc in 0..co {
                let wv = weight[oc * ck + p];
                if wv == 0.0 {
                    continue;
                }
                let dyplane = &dy[(ni * co + oc) * howo..(ni * co + oc + 1) * howo];
                for (o, &gv) in crow.iter_mut().zip(dyplane) {
                    *o += wv * gv;
                }
            }
        });
        col2im_add(&dcol, &mut dx[ni * ci * h * w..(ni + 1) * ci * h * w], ci, h, w, kh, kw, stride, ho, wo);
    }
    dx
}

/// Gradient of conv2d w.r.t. its weight.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_w(
    x: &[f32],
    dy: &[f32],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Vec<f32> {
    let (ho, wo) = (conv_out_size(h, stride), conv_out_size(w, stride));
    let howo = ho * wo;
    let ck = ci * kh * kw;
    let mut dw = vec![0.0f32; co * ck];
    if kh == 1 && kw == 1 && stride == 1 {
        dw.par_chunks_mut(ck).enumerate().for_each(|(oc, wslice)| {
            for ni in 0..n {
                let dyplane = &dy[(ni * co + oc) * howo..(ni * co + oc + 1) * howo];
                for (ic, wv) in wslice.iter_mut().enumerate() {
                    let xplane = &x[(ni * ci + ic) * howo..(ni * ci + ic + 1) * howo];
                    *wv += dot(xplane, dyplane);
                }
            }
        });
        return dw;
    }
    // dW[oc, p] += dot(dy[oc], col[p]) per sample
    for ni in 0..n {
        let col = im2col(&x[ni * ci * h * w..(ni + 1) * ci * h * w], ci, h, w, kh, kw, stride, ho, wo);
        dw.par_chunks_mut(ck).enumerate().for_each(|(oc, wslice)| {
            let dyplane = &dy[(ni * co + oc) * howo..(ni * co + oc + 1) * howo];
            for (p, wv) in wslice.iter_mut().enumerate() {
                *wv += dot(&col[p * howo..(p + 1) * howo], dyplane);
            }
        });
    }
    dw
}

/// Gradient of conv2d w.r.t. its bias: sum of dy over (n, ho, wo) per channel.
pub fn conv2d_backward_b(dy: &[f32], n: usize, co: usize, howo: usize) -> Vec<f32> {
    let mut db = vec![0.0f32; co];
    for ni in 0..n {
        for (oc, d) in db.iter_mut().enumerate() {
            let base = (ni * co + oc) * howo;
            for v in &dy[base..base + howo] {
                *d += v;
            }
        }
    }
    db
}

/// Depthwise 2-D convolution, 'same' padding: weight [c, kh, kw], one filter per channel.
pub fn dwconv2d_forward(
    x: &[f32],
    weight: &[f32],
    n: usize,
    ch: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Vec<f32> {
    let (ho, wo) = (conv_out_size(h, stride), conv_out_size(w, stride));
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0f32; n * ch * ho * wo];
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(idx, plane)| {
        let (ni, c0) = (idx / ch, idx % ch);
        let xbase = (ni * ch + c0) * h * w;
        let wbase = c0 * kh * kw;
        for r in 0..kh {
            for oh in 0..ho {
                let ih = (oh * stride + r) as isize - ph as isize;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                let xrow = &x[xbase + ih as usize * w..xbase + (ih as usize + 1) * w];
                let orow = &mut plane[oh * wo..(oh + 1) * wo];
                for c in 0..kw {
                    let wv = weight[wbase + r * kw + c];
                    let (lo, hi) = tap_range(w, wo, stride, c, pw);
                    if stride == 1 {
                        saxpy_tap(orow, xrow, wv, lo, hi, c, pw);
                    } else {
                        for ow in lo..hi {
                            let iw = (ow * stride + c) as isize - pw as isize;
                            orow[ow] += wv * xrow[iw as usize];
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn dwconv2d_backward_x(
    dy: &[f32],
    weight: &[f32],
    n: usize,
    ch: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Vec<f32> {
    let (ho, wo) = (conv_out_size(h, stride), conv_out_size(w, stride));
    let (ph, pw) = (kh / 2, kw / 2);
    let mut dx = vec![0.0f32; n * ch * h * w];
    dx.par_chunks_mut(h * w).enumerate().for_each(|(idx, plane)| {
        let (ni, c0) = (idx / ch, idx % ch);
        let dybase = (ni * ch + c0) * ho * wo;
        let wbase = c0 * kh * kw;
        for r in 0..kh {
            for oh in 0..ho {
                let ih = (oh * stride + r) as isize - ph as isize;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                let dyrow = &dy[dybase + oh * wo..dybase + (oh + 1) * wo];
                let xrow = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                for c in 0..kw {
                    let wv = weight[wbase + r * kw + c];
                    let (lo, hi) = tap_range(w, wo, stride, c, pw);
                    if stride == 1 {
                        saxpy_tap_rev(xrow, dyrow, wv, lo, hi, c, pw);
                    } else {
                        for ow in lo..hi {
                            let iw = (ow * stride + c) as isize - pw as isize;
                            xrow[iw as usize] += wv * dyrow[ow];
                        }
                    }
                }
            }
        }
    });
    dx
}

pub fn dwconv2d_backward_w(
    x: &[f32],
    dy: &[f32],
    n: usize,
    ch: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Vec<f32> {
    let (ho, wo) = (conv_out_size(h, stride), conv_out_size(w, stride));
    let (ph, pw) = (kh / 2, kw / 2);
    let mut dw = vec![0.0f32; ch * kh * kw];
    dw.par_chunks_mut(kh * kw).enumerate().for_each(|(c0, wslice)| {
        for ni in 0..n {
            let xbase = (ni * ch + c0) * h * w;
            let dybase = (ni * ch + c0) * ho * wo;
            for r in 0..kh {
                for oh in 0..ho {
                    let ih = (oh * stride + r) as isize - ph as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let xrow = &x[xbase + ih as usize * w..xbase + (ih as usize + 1) * w];
                    let dyrow = &dy[dybase + oh * wo..dybase + (oh + 1) * wo];
                    for c in 0..kw {
                        let (lo, hi) = tap_range(w, wo, stride, c, pw);
                        let acc = if stride == 1 && hi > lo {
                            let start = (lo + c) - pw;
                            dot(&xrow[start..start + (hi - lo)], &dyrow[lo..hi])
                        } else {
                            let mut acc = 0.0f32;
                            for ow in lo..hi {
                                let iw = (ow * stride + c) as isize - pw as isize;
                                acc += xrow[iw as usize] * dyrow[ow];
                            }
                            acc
                        };
                        wslice[r * kw + c] += acc;
                    }
                }
            }
        }
    });
    dw
}

/// Numerically stable row-wise softmax of logits/tau. x: rows×cols.
pub fn softmax_rows(x: &[f32], rows: usize, cols: usize, tau: f32) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut m = f32::NEG_INFINITY;
        for &v in row {
            m = m.max(v / tau);
        }
        let mut s = 0.0f32;
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = ((v / tau) - m).exp();
            *o = e;
            s += e;
        }
        for o in orow.iter_mut() {
            *o /= s;
        }
    }
    out
}

/// Guarded natural log: ln(x + 1e-12).
pub fn log_guarded(x: f32) -> f32 {
    (x + 1e-12).ln()
}

/// Sequential f32 sum; the canonical reduction order for the whole crate.
pub fn sum(x: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for &v in x {
        s += v;
    }
    s
}

pub fn hard_swish(x: f32) -> f32 {
    x * (x + 3.0).clamp(0.0, 6.0) / 6.0
}

pub fn hard_swish_grad(x: f32) -> f32 {
    if x <= -3.0 {
        0.0
    } else if x >= 3.0 {
        1.0
    } else {
        (2.0 * x + 3.0) / 6.0
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Smooth-L1 of a single element: 0.5x^2 for |x|<1, |x|-0.5 otherwise.
pub fn smooth_l1(x: f32) -> f32 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f32) -> f32 {
    x.clamp(-1.0, 1.0)
}

pub fn all_finite(x: &[f32]) -> bool {
    x.iter().all(|v| v.is_finite())
}
