//! Raw forward/backward kernels. No tape, no validation beyond what the
//! indexing needs; [`super::Tape`] checks shapes before calling in.
//!
//! Every reduction runs in a fixed index order so results are reproducible
//! bit for bit.

use super::{ConvSpec, Scalar, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.03;
pub const LEAKY_SLOPE: f64 = 0.1;

// ---------------------------------------------------------------------------
// GEMM
// ---------------------------------------------------------------------------

/// Register tile: `MR` rows × `NR` columns of `c` held in locals.
const MR: usize = 8;
const NR: usize = 32;

/// `acc[r][j] += Σ_p a[p][r] · b[p][j]` over packed panels, ascending `p`.
#[inline(always)]
fn micro_kernel<T: Scalar, const R: usize>(k: usize, a_panel: &[T], b_panel: &[T], acc: &mut [[T; NR]; R]) {
    let a_panel = &a_panel[..k * R];
    let b_panel = &b_panel[..k * NR];
    for (av, bv) in a_panel.chunks_exact(R).zip(b_panel.chunks_exact(NR)) {
        let bv: &[T; NR] = bv.try_into().expect("NR-wide panel row");
        for r in 0..R {
            let a = av[r];
            for j in 0..NR {
                acc[r][j] = acc[r][j] + a * bv[j];
            }
        }
    }
}

/// Rows `i..i+R`, columns `j..j+width` of `c` against a packed `b` panel
/// (zero beyond `width`).
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn tile<T: Scalar, const R: usize>(
    i: usize,
    j: usize,
    width: usize,
    n: usize,
    k: usize,
    a: &[T],
    a_panel: &mut [T],
    b_panel: &[T],
    c: &mut [T],
) {
    for r in 0..R {
        let row = &a[(i + r) * k..(i + r + 1) * k];
        for (p, &v) in row.iter().enumerate() {
            a_panel[p * R + r] = v;
        }
    }
    let mut acc = [[T::zero(); NR]; R];
    for (r, row) in acc.iter_mut().enumerate() {
        row[..width].copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + width]);
    }
    micro_kernel::<T, R>(k, a_panel, b_panel, &mut acc);
    for (r, row) in acc.iter().enumerate() {
        c[(i + r) * n + j..(i + r) * n + j + width].copy_from_slice(&row[..width]);
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
///
/// Each `c[i][j]` accumulates its `k` products in ascending `k` order, so the
/// result does not depend on which instruction set runs it.
pub fn gemm_nn<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was just detected.
        unsafe { gemm_nn_avx2(m, n, k, a, b, c) };
        return;
    }
    gemm_nn_portable(m, n, k, a, b, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
fn gemm_nn_avx2<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_nn_portable(m, n, k, a, b, c);
}

#[inline(always)]
fn gemm_nn_portable<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut b_panel = vec![T::zero(); k * NR];
    let mut a_panel = vec![T::zero(); k * MR];
    let mut j = 0;
    while j < n {
        let width = NR.min(n - j);
        for p in 0..k {
            let dst = &mut b_panel[p * NR..(p + 1) * NR];
            dst[..width].copy_from_slice(&b[p * n + j..p * n + j + width]);
            dst[width..].fill(T::zero());
        }
        let mut i = 0;
        while i + MR <= m {
            tile::<T, MR>(i, j, width, n, k, a, &mut a_panel, &b_panel, c);
            i += MR;
        }
        while i + 2 <= m {
            tile::<T, 2>(i, j, width, n, k, a, &mut a_panel, &b_panel, c);
            i += 2;
        }
        if i < m {
            tile::<T, 1>(i, j, width, n, k, a, &mut a_panel, &b_panel, c);
        }
        j += NR;
    }
}

fn transpose<T: Scalar>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for (c, &v) in src[r * cols..(r + 1) * cols].iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
    out
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn gemm_nt<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_nn(m, n, k, a, &transpose(n, k, b), c);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`.
pub fn gemm_tn<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_nn(m, n, k, &transpose(k, m, a), b, c);
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Unfold `channels` planes starting at `x` into a `(channels·k·k) × (oh·ow)`
/// column matrix. Out-of-bounds taps are zero.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let plane = oh * ow;
    for c in 0..channels {
        let xp = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &xp[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column matrix back into `channels` planes.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let plane = oh * ow;
    for c in 0..channels {
        let dp = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let d = &mut dp[iy as usize * w + ix as usize];
                        *d = *d + src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

fn is_direct(spec: &ConvSpec) -> bool {
    spec.kernel == 1 && spec.stride == 1
}

/// Grouped "same"-padded convolution via per-group im2col + GEMM.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, spec: &ConvSpec) -> Tensor<T> {
    let xs = x.shape();
    let out_shape = spec.out_shape(xs);
    let (oh, ow) = (out_shape.h, out_shape.w);
    let plane = oh * ow;
    let icg = spec.in_channels / spec.groups;
    let ocg = spec.out_channels / spec.groups;
    let kk = icg * spec.kernel * spec.kernel;
    let mut out = vec![T::zero(); out_shape.numel()];
    let mut col = if is_direct(spec) {
        Vec::new()
    } else {
        vec![T::zero(); kk * plane]
    };
    let xd = x.data();
    let wd = w.data();
    for n in 0..xs.n {
        for g in 0..spec.groups {
            let x_off = (n * xs.c + g * icg) * xs.plane();
            let xg = &xd[x_off..x_off + icg * xs.plane()];
            let cols: &[T] = if is_direct(spec) {
                xg
            } else {
                im2col(xg, icg, xs.h, xs.w, spec.kernel, spec.stride, spec.padding(), oh, ow, &mut col);
                &col
            };
            let wg = &wd[g * ocg * kk..(g + 1) * ocg * kk];
            let o_off = (n * spec.out_channels + g * ocg) * plane;
            gemm_nn(ocg, plane, kk, wg, cols, &mut out[o_off..o_off + ocg * plane]);
        }
    }
    if let Some(b) = b {
        add_channel_bias(&mut out, out_shape, b.data());
    }
    Tensor::new(out_shape, out).expect("conv2d output size")
}

fn add_channel_bias<T: Scalar>(out: &mut [T], shape: Shape, bias: &[T]) {
    let plane = shape.plane();
    for n in 0..shape.n {
        for (c, &bv) in bias.iter().enumerate() {
            let start = (n * shape.c + c) * plane;
            for v in &mut out[start..start + plane] {
                *v = *v + bv;
            }
        }
    }
}

fn channel_bias_grad<T: Scalar>(dy: &[T], shape: Shape) -> Vec<T> {
    let plane = shape.plane();
    let mut db = vec![T::zero(); shape.c];
    for n in 0..shape.n {
        for (c, d) in db.iter_mut().enumerate() {
            let start = (n * shape.c + c) * plane;
            for &g in &dy[start..start + plane] {
                *d = *d + g;
            }
        }
    }
    db
}

pub struct ConvGrads<T: Scalar> {
    pub dx: Vec<T>,
    pub dw: Vec<T>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    dy: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let xs = x.shape();
    let out_shape = spec.out_shape(xs);
    let (oh, ow) = (out_shape.h, out_shape.w);
    let plane = oh * ow;
    let icg = spec.in_channels / spec.groups;
    let ocg = spec.out_channels / spec.groups;
    let kk = icg * spec.kernel * spec.kernel;
    let mut dx = vec![T::zero(); if need_dx { xs.numel() } else { 0 }];
    let mut dw = vec![T::zero(); w.len()];
    let direct = is_direct(spec);
    let mut col = vec![T::zero(); if direct { 0 } else { kk * plane }];
    let mut dcol = vec![T::zero(); if need_dx { kk * plane } else { 0 }];
    let xd = x.data();
    let wd = w.data();
    for n in 0..xs.n {
        for g in 0..spec.groups {
            let x_off = (n * xs.c + g * icg) * xs.plane();
            let xg = &xd[x_off..x_off + icg * xs.plane()];
            let cols: &[T] = if direct {
                xg
            } else {
                im2col(xg, icg, xs.h, xs.w, spec.kernel, spec.stride, spec.padding(), oh, ow, &mut col);
                &col
            };
            let o_off = (n * spec.out_channels + g * ocg) * plane;
            let dyg = &dy[o_off..o_off + ocg * plane];
            gemm_nt(ocg, kk, plane, dyg, cols, &mut dw[g * ocg * kk..(g + 1) * ocg * kk]);
            if need_dx {
                let wg = &wd[g * ocg * kk..(g + 1) * ocg * kk];
                dcol.fill(T::zero());
                gemm_tn(kk, plane, ocg, wg, dyg, &mut dcol);
                let dxg = &mut dx[x_off..x_off + icg * xs.plane()];
                if direct {
                    for (d, &v) in dxg.iter_mut().zip(&dcol) {
                        *d = *d + v;
                    }
                } else {
                    col2im(&dcol, icg, xs.h, xs.w, spec.kernel, spec.stride, spec.padding(), oh, ow, dxg);
                }
            }
        }
    }
    let db = spec.has_bias.then(|| channel_bias_grad(dy, out_shape));
    ConvGrads { dx, dw, db }
}

/// Output positions `o` along one axis whose tap `t` (0..3, padding 1)
/// lands inside an input of length `len`.
fn tap_range(len: usize, out: usize, stride: usize, t: usize) -> std::ops::Range<usize> {
    let lo = usize::from(t == 0);
    let hi = match (len + 1).checked_sub(t + 1) {
        Some(span) => (span / stride + 1).min(out),
        None => 0,
    };
    lo..hi.max(lo)
}

/// Per-channel 3×3 convolution. Each output accumulates its taps in
/// `(ky, kx)` order, as the GEMM path does, so the result matches
/// `conv2d(groups = c)` exactly.
pub fn depthwise<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, stride: usize) -> Tensor<T> {
    let xs = x.shape();
    let (oh, ow) = (xs.h.div_ceil(stride), xs.w.div_ceil(stride));
    let out_shape = Shape::new(xs.n, xs.c, oh, ow);
    let mut out = vec![T::zero(); out_shape.numel()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let xp = x.plane(n, c);
            let wk = &w.data()[c * 9..c * 9 + 9];
            let op = &mut out[(n * xs.c + c) * oh * ow..(n * xs.c + c + 1) * oh * ow];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = wk[ky * 3 + kx];
                    let cols = tap_range(xs.w, ow, stride, kx);
                    for oy in tap_range(xs.h, oh, stride, ky) {
                        let iy = oy * stride + ky - 1;
                        let src = &xp[iy * xs.w..(iy + 1) * xs.w];
                        let dst = &mut op[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let src = &src[cols.start + kx - 1..cols.end + kx - 1];
                            for (d, &v) in dst[cols.clone()].iter_mut().zip(src) {
                                *d = *d + wv * v;
                            }
                        } else {
                            for ox in cols.clone() {
                                dst[ox] = dst[ox] + wv * src[ox * stride + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = b {
        add_channel_bias(&mut out, out_shape, b.data());
    }
    Tensor::new(out_shape, out).expect("depthwise output size")
}

pub fn depthwise_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    has_bias: bool,
    dy: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let xs = x.shape();
    let (oh, ow) = (xs.h.div_ceil(stride), xs.w.div_ceil(stride));
    let out_shape = Shape::new(xs.n, xs.c, oh, ow);
    let mut dx = vec![T::zero(); if need_dx { xs.numel() } else { 0 }];
    let mut dw = vec![T::zero(); w.len()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let xp = x.plane(n, c);
            let wk = &w.data()[c * 9..c * 9 + 9];
            let base = (n * xs.c + c) * oh * ow;
            let dyp = &dy[base..base + oh * ow];
            for ky in 0..3 {
                for kx in 0..3 {
                    let tap = ky * 3 + kx;
                    let cols = tap_range(xs.w, ow, stride, kx);
                    let mut acc = dw[c * 9 + tap];
                    for oy in tap_range(xs.h, oh, stride, ky) {
                        let iy = oy * stride + ky - 1;
                        let g_row = &dyp[oy * ow..(oy + 1) * ow];
                        let x_row = &xp[iy * xs.w..(iy + 1) * xs.w];
                        for ox in cols.clone() {
                            acc = acc + g_row[ox] * x_row[ox * stride + kx - 1];
                        }
                        if need_dx {
                            let plane = &mut dx[(n * xs.c + c) * xs.plane()..(n * xs.c + c + 1) * xs.plane()];
                            let d_row = &mut plane[iy * xs.w..(iy + 1) * xs.w];
                            let wv = wk[tap];
                            for ox in cols.clone() {
                                let d = &mut d_row[ox * stride + kx - 1];
                                *d = *d + g_row[ox] * wv;
                            }
                        }
                    }
                    dw[c * 9 + tap] = acc;
                }
            }
        }
    }
    let db = has_bias.then(|| channel_bias_grad(dy, out_shape));
    ConvGrads { dx, dw, db }
}

// ---------------------------------------------------------------------------
// Channel permutations and slicing
// ---------------------------------------------------------------------------

/// Source channel for each output channel of a `groups`-way shuffle:
/// reshape `(g, c/g)`, transpose, flatten.
pub fn shuffle_perm(channels: usize, groups: usize) -> Vec<usize> {
    let per = channels / groups;
    (0..channels).map(|j| (j % groups) * per + j / groups).collect()
}

pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &src) in perm.iter().enumerate() {
        inv[src] = j;
    }
    inv
}

/// Output channel `j` is input channel `perm[j]`.
pub fn permute_channels<T: Scalar>(x: &[T], shape: Shape, perm: &[usize]) -> Vec<T> {
    let plane = shape.plane();
    let mut out = Vec::with_capacity(x.len());
    for n in 0..shape.n {
        for &src in perm {
            let start = (n * shape.c + src) * plane;
            out.extend_from_slice(&x[start..start + plane]);
        }
    }
    out
}

pub fn narrow_channels<T: Scalar>(x: &[T], shape: Shape, start: usize, len: usize) -> Vec<T> {
    let plane = shape.plane();
    let mut out = Vec::with_capacity(shape.n * len * plane);
    for n in 0..shape.n {
        let off = (n * shape.c + start) * plane;
        out.extend_from_slice(&x[off..off + len * plane]);
    }
    out
}

pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let first = parts[0].shape();
    let c: usize = parts.iter().map(|p| p.shape().c).sum();
    let shape = Shape::new(first.n, c, first.h, first.w);
    let plane = first.plane();
    let mut out = Vec::with_capacity(shape.numel());
    for n in 0..first.n {
        for p in parts {
            let pc = p.shape().c;
            out.extend_from_slice(&p.data()[n * pc * plane..(n + 1) * pc * plane]);
        }
    }
    Tensor::new(shape, out).expect("concat output size")
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Inference-mode batchnorm with stored statistics.
pub fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
) -> Tensor<T> {
    let s = x.shape();
    let eps = T::of(BN_EPS);
    let mut out = x.data().to_vec();
    for n in 0..s.n {
        for c in 0..s.c {
            let scale = gamma[c] / (var[c] + eps).sqrt();
            let shift = beta[c] - mean[c] * scale;
            let start = (n * s.c + c) * s.plane();
            for v in &mut out[start..start + s.plane()] {
                *v = *v * scale + shift;
            }
        }
    }
    Tensor::new(s, out).expect("bn output size")
}

/// Training-mode batchnorm. Returns the output, the normalized input, the
/// per-channel inverse std, and the batch mean / biased variance.
pub struct BnTrain<T: Scalar> {
    pub out: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub fn batchnorm_train<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> BnTrain<T> {
    let s = x.shape();
    let count = (s.n * s.plane()) as f64;
    let plane = s.plane();
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    let mut inv_std = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut sum = 0.0f64;
        for n in 0..s.n {
            sum += x.plane(n, c).iter().map(|v| v.f64()).sum::<f64>();
        }
        let mu = sum / count;
        let mut sq = 0.0f64;
        for n in 0..s.n {
            sq += x.plane(n, c).iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>();
        }
        let v = sq / count;
        mean[c] = T::of(mu);
        var[c] = T::of(v);
        inv_std[c] = T::of(1.0 / (v + BN_EPS).sqrt());
    }
    let mut xhat = vec![T::zero(); s.numel()];
    let mut out = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * plane;
            for i in start..start + plane {
                let xh = (x.data()[i] - mean[c]) * inv_std[c];
                xhat[i] = xh;
                out[i] = gamma[c] * xh + beta[c];
            }
        }
    }
    BnTrain {
        out: Tensor::new(s, out).expect("bn output size"),
        xhat,
        inv_std,
        mean,
        var,
    }
}

/// Gradients of training-mode batchnorm w.r.t. input, gamma, beta.
pub fn batchnorm_train_backward<T: Scalar>(
    shape: Shape,
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = shape.plane();
    let m = T::of((shape.n * plane) as f64);
    let mut dgamma = vec![T::zero(); shape.c];
    let mut dbeta = vec![T::zero(); shape.c];
    for n in 0..shape.n {
        for c in 0..shape.c {
            let start = (n * shape.c + c) * plane;
            for i in start..start + plane {
                dbeta[c] = dbeta[c] + dy[i];
                dgamma[c] = dgamma[c] + dy[i] * xhat[i];
            }
        }
    }
    let mut dx = vec![T::zero(); shape.numel()];
    for n in 0..shape.n {
        for c in 0..shape.c {
            let k = gamma[c] * inv_std[c] / m;
            let start = (n * shape.c + c) * plane;
            for i in start..start + plane {
                dx[i] = k * (m * dy[i] - dbeta[c] - xhat[i] * dgamma[c]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Normalize over channels at each `(n, y, x)` position.
pub struct LnOut<T: Scalar> {
    pub out: Tensor<T>,
    pub xhat: Vec<T>,
    /// Indexed by `n * plane + pos`.
    pub inv_std: Vec<T>,
}

pub fn layernorm_channels<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> LnOut<T> {
    let s = x.shape();
    let plane = s.plane();
    let xd = x.data();
    let mut xhat = vec![T::zero(); s.numel()];
    let mut out = vec![T::zero(); s.numel()];
    let mut inv_std = vec![T::zero(); s.n * plane];
    for n in 0..s.n {
        for p in 0..plane {
            let idx = |c: usize| (n * s.c + c) * plane + p;
            let mu = (0..s.c).map(|c| xd[idx(c)].f64()).sum::<f64>() / s.c as f64;
            let var = (0..s.c).map(|c| (xd[idx(c)].f64() - mu).powi(2)).sum::<f64>() / s.c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[n * plane + p] = T::of(is);
            for c in 0..s.c {
                let i = idx(c);
                let xh = T::of((xd[i].f64() - mu) * is);
                xhat[i] = xh;
                out[i] = gamma[c] * xh + beta[c];
            }
        }
    }
    LnOut {
        out: Tensor::new(s, out).expect("ln output size"),
        xhat,
        inv_std,
    }
}

pub fn layernorm_channels_backward<T: Scalar>(
    shape: Shape,
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = shape.plane();
    let cf = T::of(shape.c as f64);
    let mut dx = vec![T::zero(); shape.numel()];
    let mut dgamma = vec![T::zero(); shape.c];
    let mut dbeta = vec![T::zero(); shape.c];
    for n in 0..shape.n {
        for p in 0..plane {
            let idx = |c: usize| (n * shape.c + c) * plane + p;
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for c in 0..shape.c {
                let i = idx(c);
                let g = dy[i] * gamma[c];
                sum_g = sum_g + g;
                sum_gx = sum_gx + g * xhat[i];
                dgamma[c] = dgamma[c] + dy[i] * xhat[i];
                dbeta[c] = dbeta[c] + dy[i];
            }
            let is = inv_std[n * plane + p];
            for c in 0..shape.c {
                let i = idx(c);
                let g = dy[i] * gamma[c];
                dx[i] = is / cf * (cf * g - sum_g - xhat[i] * sum_gx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn leaky_relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        v * T::of(LEAKY_SLOPE)
    }
}

#[inline]
pub fn leaky_relu_grad<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else {
        T::of(LEAKY_SLOPE)
    }
}

#[inline]
pub fn silu<T: Scalar>(v: T) -> T {
    v * sigmoid(v)
}

#[inline]
pub fn silu_grad<T: Scalar>(v: T) -> T {
    let s = sigmoid(v);
    s * (T::one() + v * (T::one() - s))
}

// ---------------------------------------------------------------------------
// Pooling / resampling
// ---------------------------------------------------------------------------

/// Max pool with `k/2` implicit padding (padding never wins). Returns the
/// output and, per output element, the flat input index of the first maximum
/// in row-major window order.
///
/// Runs as a row pass then a column pass; taking the first strict maximum
/// in each pass selects the same element as a row-major scan of the window.
pub fn maxpool<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize) -> (Tensor<T>, Vec<usize>) {
    let s = x.shape();
    let pad = k / 2;
    let (oh, ow) = (s.h.div_ceil(stride), s.w.div_ceil(stride));
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let window = |o: usize, len: usize| (o * stride).saturating_sub(pad)..(o * stride + k - pad).min(len);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut arg = Vec::with_capacity(out_shape.numel());
    let mut row_max = vec![T::zero(); s.h * ow];
    let mut row_arg = vec![0usize; s.h * ow];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            let xp = x.plane(n, c);
            for iy in 0..s.h {
                let src = &xp[iy * s.w..(iy + 1) * s.w];
                for ox in 0..ow {
                    let (mut best, mut best_i) = (T::neg_infinity(), 0);
                    for ix in window(ox, s.w) {
                        if src[ix] > best {
                            best = src[ix];
                            best_i = ix;
                        }
                    }
                    row_max[iy * ow + ox] = best;
                    row_arg[iy * ow + ox] = iy * s.w + best_i;
                }
            }
            for oy in 0..oh {
                for ox in 0..ow {
                    let (mut best, mut best_i) = (T::neg_infinity(), 0);
                    for iy in window(oy, s.h) {
                        let v = row_max[iy * ow + ox];
                        if v > best {
                            best = v;
                            best_i = row_arg[iy * ow + ox];
                        }
                    }
                    out.push(best);
                    arg.push(base + best_i);
                }
            }
        }
    }
    (Tensor::new(out_shape, out).expect("pool output size"), arg)
}

pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = x.shape();
    let out_shape = Shape::new(s.n, s.c, s.h * factor, s.w * factor);
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let xp = x.plane(n, c);
            for oy in 0..out_shape.h {
                let row = &xp[(oy / factor) * s.w..(oy / factor + 1) * s.w];
                for ox in 0..out_shape.w {
                    out.push(row[ox / factor]);
                }
            }
        }
    }
    Tensor::new(out_shape, out).expect("upsample output size")
}

pub fn upsample_nearest_backward<T: Scalar>(in_shape: Shape, factor: usize, dy: &[T]) -> Vec<T> {
    let (oh, ow) = (in_shape.h * factor, in_shape.w * factor);
    let mut dx = vec![T::zero(); in_shape.numel()];
    for nc in 0..in_shape.n * in_shape.c {
        let src = &dy[nc * oh * ow..(nc + 1) * oh * ow];
        let dst = &mut dx[nc * in_shape.plane()..(nc + 1) * in_shape.plane()];
        for oy in 0..oh {
            for ox in 0..ow {
                let d = &mut dst[(oy / factor) * in_shape.w + ox / factor];
                *d = *d + src[oy * ow + ox];
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Softmax and attention
// ---------------------------------------------------------------------------

/// Numerically stable softmax of each contiguous row of length `len`, in place.
pub fn softmax_rows<T: Scalar>(data: &mut [T], len: usize) {
    for row in data.chunks_mut(len) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// `dx = p ⊙ (dy − Σ p·dy)` per row.
pub fn softmax_rows_backward<T: Scalar>(p: &[T], dy: &[T], len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); p.len()];
    for ((pr, gr), dr) in p.chunks(len).zip(dy.chunks(len)).zip(dx.chunks_mut(len)) {
        let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &pv), &gv) in dr.iter_mut().zip(pr).zip(gr) {
            *d = pv * (gv - dot);
        }
    }
    dx
}

/// Multi-head scaled dot-product attention over spatial positions.
///
/// `q`, `k`, `v` are `(n, c, h, w)`; head `i` owns channels
/// `[i·d, (i+1)·d)` with `d = c / heads`, and the `h·w` positions are tokens.
/// Returns the output and the softmax probabilities, laid out
/// `[n][head][query][key]`.
pub fn attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> (Tensor<T>, Vec<T>) {
    let s = q.shape();
    let l = s.plane();
    let d = s.c / heads;
    let scale = T::of(1.0 / (d as f64).sqrt());
    let mut probs = vec![T::zero(); s.n * heads * l * l];
    let mut out = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        for hd in 0..heads {
            let off = (n * s.c + hd * d) * l;
            let qh = &q.data()[off..off + d * l];
            let kh = &k.data()[off..off + d * l];
            let vh = &v.data()[off..off + d * l];
            let p = &mut probs[(n * heads + hd) * l * l..(n * heads + hd + 1) * l * l];
            gemm_tn(l, l, d, qh, kh, p);
            for x in p.iter_mut() {
                *x = *x * scale;
            }
            softmax_rows(p, l);
            // outᵀ = p · vᵀ keeps the l×l matrix untransposed.
            let mut out_t = vec![T::zero(); l * d];
            gemm_nn(l, d, l, p, &transpose(d, l, vh), &mut out_t);
            out[off..off + d * l].copy_from_slice(&transpose(l, d, &out_t));
        }
    }
    (Tensor::new(s, out).expect("attention output size"), probs)
}

pub struct AttnGrads<T: Scalar> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
}

pub fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    probs: &[T],
    dy: &[T],
) -> AttnGrads<T> {
    let s = q.shape();
    let l = s.plane();
    let d = s.c / heads;
    let scale = T::of(1.0 / (d as f64).sqrt());
    let mut dq = vec![T::zero(); s.numel()];
    let mut dk = vec![T::zero(); s.numel()];
    let mut dv = vec![T::zero(); s.numel()];
    let mut dp = vec![T::zero(); l * l];
    for n in 0..s.n {
        for hd in 0..heads {
            let off = (n * s.c + hd * d) * l;
            let qh = &q.data()[off..off + d * l];
            let kh = &k.data()[off..off + d * l];
            let vh = &v.data()[off..off + d * l];
            let doh = &dy[off..off + d * l];
            let p = &probs[(n * heads + hd) * l * l..(n * heads + hd + 1) * l * l];
            // out[d][i] = Σ_j v[d][j] p[i][j]
            gemm_nn(d, l, l, doh, p, &mut dv[off..off + d * l]);
            dp.fill(T::zero());
            gemm_tn(l, l, d, doh, vh, &mut dp);
            let mut ds = softmax_rows_backward(p, &dp, l);
            for x in ds.iter_mut() {
                *x = *x * scale;
            }
            // s[i][j] = Σ_d q[d][i] k[d][j]
            gemm_nt(d, l, l, kh, &ds, &mut dq[off..off + d * l]);
            gemm_nn(d, l, l, qh, &ds, &mut dk[off..off + d * l]);
        }
    }
    AttnGrads { dq, dk, dv }
}
