//! Shape-checked slice kernels behind the tensor ops. Pure functions:
//! forward values and vector-Jacobian products, no graph knowledge.
//!
//! Parallel sections only split disjoint output ranges; every inner reduction
//! runs in a fixed sequential order, so the result is bitwise identical for
//! any thread cap.

use super::Elem;
use crate::thread_cap;
use rayon::prelude::*;
use std::sync::OnceLock;

static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

fn pool() -> Option<&'static rayon::ThreadPool> {
    POOL.get_or_init(|| {
        let cap = thread_cap();
        if cap <= 1 {
            None
        } else {
            rayon::ThreadPoolBuilder::new().num_threads(cap).build().ok()
        }
    })
    .as_ref()
}

/// Apply `f` to equal chunks of `out`; chunk i covers `out[i*chunk..]`.
/// Runs sequentially when the thread cap or the work size is small.
pub(crate) fn chunked_fill<T: Send, F>(out: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let small = out.len() < 4096;
    if thread_cap() <= 1 || small {
        for (i, c) in out.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    } else {
        match pool() {
            Some(p) => p.install(|| {
                out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            }),
            None => {
                for (i, c) in out.chunks_mut(chunk).enumerate() {
                    f(i, c);
                }
            }
        }
    }
}

// ── Matrix products ─────────────────────────────────────────────────

/// C[m,n] = A[m,k] · B[k,n]
pub fn matmul_nn<T: Elem>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    chunked_fill(&mut out, n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    });
    out
}

/// C[m,k] = A[m,n] · B[k,n]ᵀ
pub fn matmul_nt<T: Elem>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * k];
    chunked_fill(&mut out, k, |i, row| {
        let ar = &a[i * n..(i + 1) * n];
        for (p, o) in row.iter_mut().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            let mut acc = T::ZERO;
            for (&av, &bv) in ar.iter().zip(br) {
                acc += av * bv;
            }
            *o = acc;
        }
    });
    out
}

/// C[k,n] = A[m,k]ᵀ · B[m,n]
pub fn matmul_tn<T: Elem>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; k * n];
    chunked_fill(&mut out, n, |p, row| {
        for i in 0..m {
            let av = a[i * k + p];
            let br = &b[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    });
    out
}

// ── Convolution ─────────────────────────────────────────────────────

pub fn conv2d_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// input [ci,h,w], weight [co,ci,kh,kw], bias [co] optional → out [co,oh,ow]
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<T: Elem>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let oh = conv2d_out_dim(h, kh, stride, pad);
    let ow = conv2d_out_dim(w, kw, stride, pad);
    let mut out = vec![T::ZERO; co * oh * ow];
    chunked_fill(&mut out, oh * ow, |oc, plane| {
        let wbase = oc * ci * kh * kw;
        let b = bias.map(|b| b[oc]).unwrap_or(T::ZERO);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                let iy0 = (oy * stride) as isize - pad as isize;
                let ix0 = (ox * stride) as isize - pad as isize;
                for ic in 0..ci {
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = (ic * h + iy as usize) * w;
                        let wrow = wbase + (ic * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += input[irow + ix as usize] * weight[wrow + kx];
                        }
                    }
                }
                plane[oy * ow + ox] = acc;
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_input<T: Elem>(
    grad_out: &[T],
    weight: &[T],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let oh = conv2d_out_dim(h, kh, stride, pad);
    let ow = conv2d_out_dim(w, kw, stride, pad);
    let mut dinput = vec![T::ZERO; ci * h * w];
    // Parallel over input channels: each chunk gathers from all output cells.
    chunked_fill(&mut dinput, h * w, |ic, plane| {
        for oc in 0..co {
            let wbase = (oc * ci + ic) * kh * kw;
            let gbase = oc * oh * ow;
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ox in 0..ow {
                    let g = grad_out[gbase + oy * ow + ox];
                    let ix0 = (ox * stride) as isize - pad as isize;
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            plane[iy as usize * w + ix as usize] += g * weight[wbase + ky * kw + kx];
                        }
                    }
                }
            }
        }
    });
    dinput
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_weight<T: Elem>(
    grad_out: &[T],
    input: &[T],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let oh = conv2d_out_dim(h, kh, stride, pad);
    let ow = conv2d_out_dim(w, kw, stride, pad);
    let mut dweight = vec![T::ZERO; co * ci * kh * kw];
    chunked_fill(&mut dweight, ci * kh * kw, |oc, wslab| {
        let gbase = oc * oh * ow;
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..ow {
                let g = grad_out[gbase + oy * ow + ox];
                let ix0 = (ox * stride) as isize - pad as isize;
                for ic in 0..ci {
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = (ic * h + iy as usize) * w;
                        let wrow = (ic * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            wslab[wrow + kx] += g * input[irow + ix as usize];
                        }
                    }
                }
            }
        }
    });
    dweight
}

pub fn conv2d_bwd_bias<T: Elem>(grad_out: &[T], co: usize) -> Vec<T> {
    let plane = grad_out.len() / co;
    (0..co)
        .map(|oc| {
            let mut acc = T::ZERO;
            for &g in &grad_out[oc * plane..(oc + 1) * plane] {
                acc += g;
            }
            acc
        })
        .collect()
}

// ── Bilinear sampling ───────────────────────────────────────────────
//
// Continuous pixel coordinates: integer (x, y) lands exactly on texel
// (row y, col x). Reads outside [0,w-1]×[0,h-1] are zero. Interpolation is
// the two-lerp form v0 + f·(v1-v0), which makes stored values and constants
// exact fixed points.

#[inline]
fn read_padded<T: Elem>(map: &[T], h: usize, w: usize, c: usize, y: isize, x: isize) -> T {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        T::ZERO
    } else {
        map[(c * h + y as usize) * w + x as usize]
    }
}

/// map [c,h,w], points [n,2] (x, y) → out [n,c]
pub fn grid_sample_fwd<T: Elem>(map: &[T], c: usize, h: usize, w: usize, points: &[T]) -> Vec<T> {
    let n = points.len() / 2;
    let mut out = vec![T::ZERO; n * c];
    for p in 0..n {
        let x = points[2 * p];
        let y = points[2 * p + 1];
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let xi = x0.to_f64() as isize;
        let yi = y0.to_f64() as isize;
        for ch in 0..c {
            let v00 = read_padded(map, h, w, ch, yi, xi);
            let v01 = read_padded(map, h, w, ch, yi, xi + 1);
            let v10 = read_padded(map, h, w, ch, yi + 1, xi);
            let v11 = read_padded(map, h, w, ch, yi + 1, xi + 1);
            let top = v00 + fx * (v01 - v00);
            let bot = v10 + fx * (v11 - v10);
            out[p * c + ch] = top + fy * (bot - top);
        }
    }
    out
}

/// Returns (d_map, d_points).
pub fn grid_sample_bwd<T: Elem>(
    map: &[T],
    c: usize,
    h: usize,
    w: usize,
    points: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let n = points.len() / 2;
    let mut dmap = vec![T::ZERO; map.len()];
    let mut dpts = vec![T::ZERO; points.len()];
    let mut scatter = |ch: usize, y: isize, x: isize, v: T| {
        if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
            dmap[(ch * h + y as usize) * w + x as usize] += v;
        }
    };
    for p in 0..n {
        let x = points[2 * p];
        let y = points[2 * p + 1];
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let xi = x0.to_f64() as isize;
        let yi = y0.to_f64() as isize;
        let (mut gx, mut gy) = (T::ZERO, T::ZERO);
        for ch in 0..c {
            let g = grad_out[p * c + ch];
            let v00 = read_padded(map, h, w, ch, yi, xi);
            let v01 = read_padded(map, h, w, ch, yi, xi + 1);
            let v10 = read_padded(map, h, w, ch, yi + 1, xi);
            let v11 = read_padded(map, h, w, ch, yi + 1, xi + 1);
            let top = v00 + fx * (v01 - v00);
            let bot = v10 + fx * (v11 - v10);
            scatter(ch, yi, xi, g * (T::ONE - fx) * (T::ONE - fy));
            scatter(ch, yi, xi + 1, g * fx * (T::ONE - fy));
            scatter(ch, yi + 1, xi, g * (T::ONE - fx) * fy);
            scatter(ch, yi + 1, xi + 1, g * fx * fy);
            gx += g * ((T::ONE - fy) * (v01 - v00) + fy * (v11 - v10));
            gy += g * (bot - top);
        }
        dpts[2 * p] = gx;
        dpts[2 * p + 1] = gy;
    }
    (dmap, dpts)
}

// ── Bilinear resize (align-corners-false, edge clamp) ───────────────

#[inline]
fn resize_src_coord<T: Elem>(dst: usize, scale: f64, src_len: usize) -> (usize, usize, T) {
    let u = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = u.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, T::from_f64(u - i0 as f64))
}

/// x [c,h,w] → out [c,oh,ow]
pub fn resize_bilinear_fwd<T: Elem>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = vec![T::ZERO; c * oh * ow];
    chunked_fill(&mut out, oh * ow, |ch, plane| {
        let base = ch * h * w;
        for oy in 0..oh {
            let (y0, y1, fy) = resize_src_coord::<T>(oy, sy, h);
            for ox in 0..ow {
                let (x0, x1, fx) = resize_src_coord::<T>(ox, sx, w);
                let v00 = x[base + y0 * w + x0];
                let v01 = x[base + y0 * w + x1];
                let v10 = x[base + y1 * w + x0];
                let v11 = x[base + y1 * w + x1];
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                plane[oy * ow + ox] = top + fy * (bot - top);
            }
        }
    });
    out
}

pub fn resize_bilinear_bwd<T: Elem>(
    grad_out: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut dx = vec![T::ZERO; c * h * w];
    chunked_fill(&mut dx, h * w, |ch, plane| {
        let gbase = ch * oh * ow;
        for oy in 0..oh {
            let (y0, y1, fy) = resize_src_coord::<T>(oy, sy, h);
            for ox in 0..ow {
                let (x0, x1, fx) = resize_src_coord::<T>(ox, sx, w);
                let g = grad_out[gbase + oy * ow + ox];
                plane[y0 * w + x0] += g * (T::ONE - fx) * (T::ONE - fy);
                plane[y0 * w + x1] += g * fx * (T::ONE - fy);
                plane[y1 * w + x0] += g * (T::ONE - fx) * fy;
                plane[y1 * w + x1] += g * fx * fy;
            }
        }
    });
    dx
}

// ── Axis iteration ──────────────────────────────────────────────────

/// (outer, len, inner) strides for reducing/scanning `axis` of `shape`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Softmax lanes along `axis` with max subtraction.
pub fn softmax_fwd<T: Elem>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::ZERO; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let mut m = x[at(0)];
            for a in 1..len {
                m = m.maximum(x[at(a)]);
            }
            let mut sum = T::ZERO;
            for a in 0..len {
                let e = (x[at(a)] - m).exp();
                out[at(a)] = e;
                sum += e;
            }
            for a in 0..len {
                out[at(a)] = out[at(a)] / sum;
            }
        }
    }
    out
}

/// Log-softmax lanes along `axis`; stable log-sum-exp form.
pub fn log_softmax_fwd<T: Elem>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::ZERO; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let mut m = x[at(0)];
            for a in 1..len {
                m = m.maximum(x[at(a)]);
            }
            let mut sum = T::ZERO;
            for a in 0..len {
                sum += (x[at(a)] - m).exp();
            }
            let lse = m + sum.ln();
            for a in 0..len {
                out[at(a)] = x[at(a)] - lse;
            }
        }
    }
    out
}

// ── Layer norm over the last axis ───────────────────────────────────

/// Returns (y, x_hat, inv_std); rows of length `width`.
pub fn layer_norm_fwd<T: Elem>(
    x: &[T],
    width: usize,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / width;
    let mut y = vec![T::ZERO; x.len()];
    let mut xhat = vec![T::ZERO; x.len()];
    let mut inv_std = vec![T::ZERO; rows];
    let inv_w = T::ONE / T::from_f64(width as f64);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_w;
        let mut var = T::ZERO;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_w;
        let istd = T::ONE / (var + eps).sqrt();
        inv_std[r] = istd;
        for i in 0..width {
            let xh = (row[i] - mean) * istd;
            xhat[r * width + i] = xh;
            y[r * width + i] = gain[i] * xh + bias[i];
        }
    }
    (y, xhat, inv_std)
}
