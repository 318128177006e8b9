//! Raw compute kernels on flat buffers. Every reduction accumulates in
//! ascending flat-index order, and parallel kernels only split work across
//! disjoint output regions, so results are bitwise deterministic regardless
//! of thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Work threshold below which matmul and conv stay single threaded.
const PAR_MIN_WORK: usize = 1 << 15;

/// Strides of `src_shape` aligned to the trailing axes of `out_shape`,
/// with 0 on stretched (extent-1) and missing leading axes.
/// Returns None when `src_shape` does not broadcast to `out_shape`.
pub fn broadcast_strides(out_shape: &[usize], src_shape: &[usize]) -> Option<Vec<usize>> {
    if src_shape.len() > out_shape.len() {
        return None;
    }
    let src_strides = super::strides_of(src_shape);
    let offset = out_shape.len() - src_shape.len();
    let mut aligned = vec![0; out_shape.len()];
    for d in 0..out_shape.len() {
        if d < offset {
            continue;
        }
        let sd = d - offset;
        if src_shape[sd] == out_shape[d] {
            aligned[d] = src_strides[sd];
        } else if src_shape[sd] == 1 {
            aligned[d] = 0;
        } else {
            return None;
        }
    }
    Some(aligned)
}

/// Walks the row-major index space of `shape`, calling `f(flat, src_flat)`
/// where `src_flat` advances by the (possibly zero) aligned `src_strides`.
pub fn walk_broadcast(shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for flat in 0..numel {
        f(flat, src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
            src -= src_strides[d] * shape[d];
        }
    }
}

// ---- elementwise scalar functions ----

pub fn gelu_val<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (T::ONE + (x * inv_sqrt2).erf())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64(0.3989422804014327);
    let cdf = half * (T::ONE + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
    cdf + x * pdf
}

// ---- matmul ----

/// c(m,n) = a(m,k) . b(k,n). `c` must be zeroed.
pub fn mm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let body = |i: usize, c_row: &mut [T]| {
        for l in 0..k {
            let a_il = a[i * k + l];
            let b_row = &b[l * n..l * n + n];
            for j in 0..n {
                c_row[j] += a_il * b_row[j];
            }
        }
    };
    if m * k * n >= PAR_MIN_WORK && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// c(m,r) = a(m,n) . b(r,n)^T. `c` must be zeroed.
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, r: usize) {
    let body = |i: usize, c_row: &mut [T]| {
        let a_row = &a[i * n..i * n + n];
        for j in 0..r {
            let b_row = &b[j * n..j * n + n];
            let mut acc = T::ZERO;
            for l in 0..n {
                acc += a_row[l] * b_row[l];
            }
            c_row[j] = acc;
        }
    };
    if m * n * r >= PAR_MIN_WORK && m > 1 {
        c.par_chunks_mut(r).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(r).enumerate() {
            body(i, row);
        }
    }
}

/// c(k,n) = a(m,k)^T . b(m,n). `c` must be zeroed.
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let body = |l: usize, c_row: &mut [T]| {
        for i in 0..m {
            let a_il = a[i * k + l];
            let b_row = &b[i * n..i * n + n];
            for j in 0..n {
                c_row[j] += a_il * b_row[j];
            }
        }
    };
    if m * k * n >= PAR_MIN_WORK && k > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(l, row)| body(l, row));
    } else {
        for (l, row) in c.chunks_mut(n).enumerate() {
            body(l, row);
        }
    }
}

// ---- conv2d ----

pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T], d: &ConvDims) {
    let plane = d.oh * d.ow;
    let body = |po: usize, out_plane: &mut [T]| {
        let b = po / d.c_out;
        let o = po % d.c_out;
        let w_base = o * d.c_in * d.kh * d.kw;
        let x_base = b * d.c_in * d.h * d.w;
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let mut acc = bias.map_or(T::ZERO, |bv| bv[o]);
                for c in 0..d.c_in {
                    for ky in 0..d.kh {
                        let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..d.kw {
                            let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            let xv = x[x_base + (c * d.h + iy as usize) * d.w + ix as usize];
                            let wv = w[w_base + (c * d.kh + ky) * d.kw + kx];
                            acc += xv * wv;
                        }
                    }
                }
                out_plane[oy * d.ow + ox] = acc;
            }
        }
    };
    let work = d.batch * d.c_out * plane * d.c_in * d.kh * d.kw;
    if work >= PAR_MIN_WORK && d.batch * d.c_out > 1 {
        out.par_chunks_mut(plane).enumerate().for_each(|(po, pl)| body(po, pl));
    } else {
        for (po, pl) in out.chunks_mut(plane).enumerate() {
            body(po, pl);
        }
    }
}

pub fn conv2d_backward_x<T: Scalar>(g: &[T], w: &[T], dx: &mut [T], d: &ConvDims) {
    let x_plane = d.c_in * d.h * d.w;
    let body = |b: usize, dx_b: &mut [T]| {
        for o in 0..d.c_out {
            let w_base = o * d.c_in * d.kh * d.kw;
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let gv = g[((b * d.c_out + o) * d.oh + oy) * d.ow + ox];
                    for c in 0..d.c_in {
                        for ky in 0..d.kh {
                            let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kx in 0..d.kw {
                                let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let wv = w[w_base + (c * d.kh + ky) * d.kw + kx];
                                dx_b[(c * d.h + iy as usize) * d.w + ix as usize] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    };
    if d.batch > 1 && d.batch * d.c_out * d.oh * d.ow * d.c_in * d.kh * d.kw >= PAR_MIN_WORK {
        dx.par_chunks_mut(x_plane).enumerate().for_each(|(b, p)| body(b, p));
    } else {
        for (b, p) in dx.chunks_mut(x_plane).enumerate() {
            body(b, p);
        }
    }
}

pub fn conv2d_backward_w<T: Scalar>(g: &[T], x: &[T], dw: &mut [T], d: &ConvDims) {
    let w_plane = d.c_in * d.kh * d.kw;
    let body = |o: usize, dw_o: &mut [T]| {
        for b in 0..d.batch {
            let x_base = b * d.c_in * d.h * d.w;
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let gv = g[((b * d.c_out + o) * d.oh + oy) * d.ow + ox];
                    for c in 0..d.c_in {
                        for ky in 0..d.kh {
                            let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kx in 0..d.kw {
                                let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let xv = x[x_base + (c * d.h + iy as usize) * d.w + ix as usize];
                                dw_o[(c * d.kh + ky) * d.kw + kx] += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    };
    if d.c_out > 1 && d.batch * d.c_out * d.oh * d.ow * w_plane >= PAR_MIN_WORK {
        dw.par_chunks_mut(w_plane).enumerate().for_each(|(o, p)| body(o, p));
    } else {
        for (o, p) in dw.chunks_mut(w_plane).enumerate() {
            body(o, p);
        }
    }
}

pub fn conv2d_backward_bias<T: Scalar>(g: &[T], dbias: &mut [T], d: &ConvDims) {
    let plane = d.oh * d.ow;
    for b in 0..d.batch {
        for o in 0..d.c_out {
            let base = (b * d.c_out + o) * plane;
            let mut acc = T::ZERO;
            for i in 0..plane {
                acc += g[base + i];
            }
            dbias[o] += acc;
        }
    }
}

// ---- capsule prediction vectors ----

/// out(B,M,c,d) where out[b,i,j,:] = u[b,i,:] . w[i mod s, j, :, :].
/// u is (B,M,p), w is (s,c,p,d).
pub fn caps_predict_forward<T: Scalar>(
    u: &[T],
    w: &[T],
    out: &mut [T],
    (batch, m, p): (usize, usize, usize),
    (s, c, d): (usize, usize, usize),
) {
    for b in 0..batch {
        for i in 0..m {
            let u_row = &u[(b * m + i) * p..(b * m + i) * p + p];
            let t = i % s;
            for j in 0..c {
                let w_base = ((t * c + j) * p) * d;
                let out_base = (((b * m + i) * c) + j) * d;
                for dd in 0..d {
                    let mut acc = T::ZERO;
                    for pp in 0..p {
                        acc += u_row[pp] * w[w_base + pp * d + dd];
                    }
                    out[out_base + dd] = acc;
                }
            }
        }
    }
}

pub fn caps_predict_backward<T: Scalar>(
    g: &[T],
    u: &[T],
    w: &[T],
    du: &mut [T],
    dw: &mut [T],
    (batch, m, p): (usize, usize, usize),
    (s, c, d): (usize, usize, usize),
) {
    for b in 0..batch {
        for i in 0..m {
            let t = i % s;
            let u_row = &u[(b * m + i) * p..(b * m + i) * p + p];
            let du_row = &mut du[(b * m + i) * p..(b * m + i) * p + p];
            for j in 0..c {
                let w_base = ((t * c + j) * p) * d;
                let g_base = (((b * m + i) * c) + j) * d;
                for pp in 0..p {
                    let mut acc = T::ZERO;
                    for dd in 0..d {
                        let gv = g[g_base + dd];
                        acc += w[w_base + pp * d + dd] * gv;
                        dw[w_base + pp * d + dd] += u_row[pp] * gv;
                    }
                    du_row[pp] += acc;
                }
            }
        }
    }
}
