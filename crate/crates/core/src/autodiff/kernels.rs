//! Forward kernels shared by op evaluation, tape replay and value-level helpers.
//!
//! Every reduction and inner product accumulates in `f64`.

#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::vec;
use alloc::vec::Vec;


use crate::real::Real;

#[inline]
pub(crate) fn to_s<S: Real>(v: Vec<f64>) -> Vec<S> {
    v.into_iter().map(S::from_f64).collect()
}

/// `[m,k] x [k,n]`, each operand optionally transposed in storage.
pub(crate) fn gemm<S: Real>(
    a: &[S],
    a_t: bool,
    b: &[S],
    b_t: bool,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    // Materialize b in row-major [k,n] f64 so the inner loop is contiguous.
    let bk: Vec<f64> = if b_t {
        let mut t = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                t[p * n + j] = b[j * k + p].as_f64();
            }
        }
        t
    } else {
        b.iter().map(|v| v.as_f64()).collect()
    };
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if a_t { a[p * m + i] } else { a[i * k + p] }.as_f64();
            if av == 0.0 {
                continue;
            }
            let brow = &bk[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Output positions `o` with `o*stride + k - pad` inside `[0, size)`.
#[inline]
fn valid_range(size: usize, out: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o*stride + k - pad <= size - 1
    let hi_num = size - 1 + pad;
    let hi = if hi_num < k {
        0
    } else {
        ((hi_num - k) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Patches of the whole batch as `[cin·kh·kw, n·oh·ow]`; padding reads as zero.
fn im2col(xf: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (p, np) = (g.oh * g.ow, g.n * g.oh * g.ow);
    let mut col = vec![0.0f64; g.cin * g.kh * g.kw * np];
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(g.h, g.oh, g.stride, ky, g.pad);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(g.w, g.ow, g.stride, kx, g.pad);
                let row = &mut col[((ci * g.kh + ky) * g.kw + kx) * np..][..np];
                for n in 0..g.n {
                    let xplane = &xf[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let xrow = &xplane[iy * g.w..(iy + 1) * g.w];
                        let dst = &mut row[n * p + oy * g.ow..][..g.ow];
                        for ox in ox0..ox1 {
                            dst[ox] = xrow[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (p, np) = (g.oh * g.ow, g.n * g.oh * g.ow);
    let mut dx = vec![0.0f64; g.n * g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(g.h, g.oh, g.stride, ky, g.pad);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(g.w, g.ow, g.stride, kx, g.pad);
                let row = &col[((ci * g.kh + ky) * g.kw + kx) * np..][..np];
                for n in 0..g.n {
                    let xplane = &mut dx[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let src = &row[n * p + oy * g.ow..][..g.ow];
                        let xrow = &mut xplane[iy * g.w..(iy + 1) * g.w];
                        for ox in ox0..ox1 {
                            xrow[ox * g.stride + kx - g.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `y[j] += Σ_i a[i]·x[i·stride + off + j]` over `j < y.len()`, terms added
/// one at a time in order of `i`, so the result matches successive axpys.
fn axpy_rows(y: &mut [f64], a: &[f64], x: &[f64], stride: usize, off: usize) {
    let len = y.len();
    let mut i = 0;
    while i + 4 <= a.len() {
        let (a0, a1, a2, a3) = (a[i], a[i + 1], a[i + 2], a[i + 3]);
        let x0 = &x[i * stride + off..][..len];
        let x1 = &x[(i + 1) * stride + off..][..len];
        let x2 = &x[(i + 2) * stride + off..][..len];
        let x3 = &x[(i + 3) * stride + off..][..len];
        for j in 0..len {
            y[j] = (((y[j] + a0 * x0[j]) + a1 * x1[j]) + a2 * x2[j]) + a3 * x3[j];
        }
        i += 4;
    }
    for (ii, &av) in a.iter().enumerate().skip(i) {
        let xr = &x[ii * stride + off..][..len];
        for j in 0..len {
            y[j] += av * xr[j];
        }
    }
}

const TILE: usize = 256;

/// Dot product with four interleaved partial sums.
#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `[n, c, p] <-> [c, n·p]`.
fn swap_batch_channel(src: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; src.len()];
    for i in 0..n {
        for ch in 0..c {
            out[ch * n * p + i * p..][..p].copy_from_slice(&src[(i * c + ch) * p..][..p]);
        }
    }
    out
}

pub(crate) fn conv_forward<S: Real>(x: &[S], w: &[S], b: Option<&[S]>, g: &ConvGeom) -> Vec<S> {
    let xf: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
    let col = im2col(&xf, g);
    let (p, np, k) = (g.oh * g.ow, g.n * g.oh * g.ow, g.cin * g.kh * g.kw);
    let mut out_t = vec![0.0f64; g.cout * np];
    let wf: Vec<f64> = w.iter().map(|v| v.as_f64()).collect();
    for co in 0..g.cout {
        let row = &mut out_t[co * np..(co + 1) * np];
        let bias = b.map_or(0.0, |b| b[co].as_f64());
        row.iter_mut().for_each(|a| *a = bias);
        let wrow = &wf[co * k..(co + 1) * k];
        for t0 in (0..np).step_by(TILE) {
            let t1 = (t0 + TILE).min(np);
            axpy_rows(&mut row[t0..t1], wrow, &col, np, t0);
        }
    }
    let mut out = Vec::with_capacity(g.n * g.cout * p);
    for n in 0..g.n {
        for co in 0..g.cout {
            out.extend(out_t[co * np + n * p..][..p].iter().map(|&v| S::from_f64(v)));
        }
    }
    out
}

/// Returns `(dx, dw, db)`.
pub(crate) fn conv_backward<S: Real>(
    x: &[S],
    w: &[S],
    gout: &[S],
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>, Option<Vec<S>>) {
    let (p, np, k) = (g.oh * g.ow, g.n * g.oh * g.ow, g.cin * g.kh * g.kw);
    let gf: Vec<f64> = gout.iter().map(|v| v.as_f64()).collect();
    let gt = swap_batch_channel(&gf, g.n, g.cout, p);
    let db = need_b.then(|| (0..g.cout).map(|co| gt[co * np..(co + 1) * np].iter().sum::<f64>()).collect::<Vec<_>>());
    let dw = need_w.then(|| {
        let xf: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
        let col = im2col(&xf, g);
        let mut dw = vec![0.0f64; g.cout * k];
        for co in 0..g.cout {
            let grow = &gt[co * np..(co + 1) * np];
            for kk in 0..k {
                dw[co * k + kk] = dot4(grow, &col[kk * np..(kk + 1) * np]);
            }
        }
        dw
    });
    let dx = need_x.then(|| {
        let mut dcol = vec![0.0f64; k * np];
        let mut wcol = vec![0.0f64; g.cout];
        for kk in 0..k {
            for (co, v) in wcol.iter_mut().enumerate() {
                *v = w[co * k + kk].as_f64();
            }
            let row = &mut dcol[kk * np..(kk + 1) * np];
            for t0 in (0..np).step_by(TILE) {
                let t1 = (t0 + TILE).min(np);
                axpy_rows(&mut row[t0..t1], &wcol, &gt, np, t0);
            }
        }
        col2im(&dcol, g)
    });
    (dx.map(to_s), dw.map(to_s), db.map(to_s))
}

/// Split a shape around `axis` into `(outer, dim, inner)`.
#[inline]
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Per-channel (axis 1) sums over all other axes, for `[N, C, ...]` layouts.
pub(crate) fn channel_sums(x: &[f64], n: usize, c: usize, inner: usize) -> Vec<f64> {
    let mut s = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * inner;
            s[ci] += x[off..off + inner].iter().sum::<f64>();
        }
    }
    s
}

pub(crate) struct BnStats {
    pub mean: Vec<f64>,
    /// Biased variance over the reduced axes.
    pub var: Vec<f64>,
    pub count: usize,
}

pub(crate) fn batch_stats<S: Real>(x: &[S], n: usize, c: usize, inner: usize) -> BnStats {
    let xf: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
    let count = n * inner;
    let mean: Vec<f64> = channel_sums(&xf, n, c, inner)
        .into_iter()
        .map(|s| s / count as f64)
        .collect();
    let mut var = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * inner;
            let m = mean[ci];
            var[ci] += xf[off..off + inner].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    BnStats { mean, var, count }
}

/// Source sampling coordinates for half-pixel-center bilinear resampling.
/// Returns `(i0, i1, frac)` per destination index.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub(crate) fn bilinear_forward<S: Real>(
    x: &[S],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let v00 = plane[y0 * w + x0].as_f64();
                let v01 = plane[y0 * w + x1].as_f64();
                let v10 = plane[y1 * w + x0].as_f64();
                let v11 = plane[y1 * w + x1].as_f64();
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out.push(S::from_f64(top + (bot - top) * fy));
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<S: Real>(
    g: &[S],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![0.0f64; planes * h * w];
    for p in 0..planes {
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let gv = gp[oy * ow + ox].as_f64();
                d[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                d[y0 * w + x1] += gv * (1.0 - fy) * fx;
                d[y1 * w + x0] += gv * fy * (1.0 - fx);
                d[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    to_s(dx)
}

/// Row-wise log-sum-exp with max subtraction.
pub(crate) fn logsumexp_rows<S: Real>(x: &[S], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            let row = &x[r * cols..(r + 1) * cols];
            let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v.as_f64() - m).exp()).sum();
            m + s.ln()
        })
        .collect()
}

pub(crate) fn softmax_rows<S: Real>(x: &[S], rows: usize, cols: usize) -> Vec<f64> {
    let lse = logsumexp_rows(x, rows, cols);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push((x[r * cols + c].as_f64() - lse[r]).exp());
        }
    }
    out
}

/// Row-major strides.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn permute<S: Real>(x: &[S], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<S>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // stride in the input for each output axis
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(x[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// For each input element, the index of the output element it reduces into.
pub(crate) fn reduce_index_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let out_strides_full: Vec<usize> = {
        let os = strides(&out_shape);
        let mut k = 0;
        shape
            .iter()
            .enumerate()
            .map(|(i, _)| {
                if axes.contains(&i) {
                    0
                } else {
                    let s = os[k];
                    k += 1;
                    s
                }
            })
            .collect()
    };
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += out_strides_full[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= out_strides_full[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}
