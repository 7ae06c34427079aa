//! Slice-level kernels behind the differentiable ops: im2col convolution,
//! nearest-neighbour upsampling, and per-channel normalisation. All image
//! buffers are NHWC.

use crate::element::{gemm, Element, Trans};
use crate::par;

/// Geometry of a same-padded 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// `x` is `[n, h, w, cin]`, `kernel` is `[kh, kw, cin, cout]`. Padding is
    /// `(k - 1) / 2` on each side, so stride 1 preserves size and stride 2
    /// halves it (rounding up).
    pub fn new(x: &[usize], kernel: &[usize], stride: usize) -> Self {
        assert_eq!(x.len(), 4, "conv input must be NHWC, got {x:?}");
        assert_eq!(kernel.len(), 4, "conv kernel must be [kh,kw,cin,cout], got {kernel:?}");
        assert_eq!(x[3], kernel[2], "conv channel mismatch: input {x:?}, kernel {kernel:?}");
        assert!(stride >= 1);
        let (kh, kw) = (kernel[0], kernel[1]);
        let pad_h = (kh - 1) / 2;
        let pad_w = (kw - 1) / 2;
        let oh = (x[1] + 2 * pad_h - kh) / stride + 1;
        let ow = (x[2] + 2 * pad_w - kw) / stride + 1;
        Self {
            n: x[0],
            h: x[1],
            w: x[2],
            cin: x[3],
            kh,
            kw,
            cout: kernel[3],
            stride,
            pad_h,
            pad_w,
            oh,
            ow,
        }
    }

    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_image(&self) -> usize {
        self.h * self.w * self.cin
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.oh, self.ow, self.cout]
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let k = g.patch();
    let run = g.cin;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * k..(oy * g.ow + ox + 1) * k];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad_h as isize;
                for kx in 0..g.kw {
                    let dst = &mut row[(ky * g.kw + kx) * run..(ky * g.kw + kx + 1) * run];
                    let ix = (ox * g.stride + kx) as isize - g.pad_w as isize;
                    if iy < 0 || iy >= g.h as isize || ix < 0 || ix >= g.w as isize {
                        dst.fill(T::zero());
                    } else {
                        let src = (iy as usize * g.w + ix as usize) * run;
                        dst.copy_from_slice(&x[src..src + run]);
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let k = g.patch();
    let run = g.cin;
    dx.fill(T::zero());
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &cols[(oy * g.ow + ox) * k..(oy * g.ow + ox + 1) * k];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad_h as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad_w as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = &row[(ky * g.kw + kx) * run..(ky * g.kw + kx + 1) * run];
                    let dst = (iy as usize * g.w + ix as usize) * run;
                    for (d, &s) in dx[dst..dst + run].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Same-padded convolution, one GEMM per image.
pub fn conv2d_forward<T: Element>(x: &[T], kernel: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let p = g.out_pixels();
    let k = g.patch();
    let mut out = vec![T::zero(); g.n * p * g.cout];
    if g.n == 0 {
        return out;
    }
    par::for_each_chunk(&mut out, p * g.cout, |i, out_i| {
        let xi = &x[i * g.in_image()..(i + 1) * g.in_image()];
        if g.is_pointwise() {
            gemm(p, k, g.cout, xi, Trans::No, kernel, Trans::No, T::zero(), out_i);
        } else {
            let mut cols = vec![T::zero(); p * k];
            im2col(xi, g, &mut cols);
            gemm(p, k, g.cout, &cols, Trans::No, kernel, Trans::No, T::zero(), out_i);
        }
        if let Some(b) = bias {
            for row in out_i.chunks_mut(g.cout) {
                for (v, &bb) in row.iter_mut().zip(b) {
                    *v += bb;
                }
            }
        }
    });
    out
}

/// Gradients requested from [`conv2d_backward`].
#[derive(Debug, Default)]
pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dkernel: Option<Vec<T>>,
    pub dbias: Option<Vec<T>>,
}

/// Number of independent kernel-gradient accumulators. Fixed so that the
/// summation order is the same whether or not the work runs in parallel.
fn kernel_grad_groups(g: &ConvGeom) -> usize {
    if g.patch() * g.cout <= 1 << 22 {
        g.n.clamp(1, 4)
    } else {
        1
    }
}

pub fn conv2d_backward<T: Element>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dkernel: bool,
    need_dbias: bool,
) -> ConvGrads<T> {
    let p = g.out_pixels();
    let k = g.patch();
    let mut grads = ConvGrads::default();

    if need_dx {
        let mut dx = vec![T::zero(); g.n * g.in_image()];
        if g.n > 0 {
            par::for_each_chunk(&mut dx, g.in_image(), |i, dx_i| {
                let dyi = &dy[i * p * g.cout..(i + 1) * p * g.cout];
                if g.is_pointwise() {
                    gemm(p, g.cout, k, dyi, Trans::No, kernel, Trans::Yes, T::zero(), dx_i);
                } else {
                    let mut dcols = vec![T::zero(); p * k];
                    gemm(p, g.cout, k, dyi, Trans::No, kernel, Trans::Yes, T::zero(), &mut dcols);
                    col2im(&dcols, g, dx_i);
                }
            });
        }
        grads.dx = Some(dx);
    }

    if need_dkernel {
        let groups = kernel_grad_groups(g);
        let partials = par::map_range(groups, |gi| {
            let lo = gi * g.n / groups;
            let hi = (gi + 1) * g.n / groups;
            let mut acc = vec![T::zero(); k * g.cout];
            let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); p * k] };
            for i in lo..hi {
                let xi = &x[i * g.in_image()..(i + 1) * g.in_image()];
                let dyi = &dy[i * p * g.cout..(i + 1) * p * g.cout];
                let a = if g.is_pointwise() {
                    xi
                } else {
                    im2col(xi, g, &mut cols);
                    &cols[..]
                };
                gemm(k, p, g.cout, a, Trans::Yes, dyi, Trans::No, T::one(), &mut acc);
            }
            acc
        });
        let mut iter = partials.into_iter();
        let mut dk = iter.next().unwrap_or_else(|| vec![T::zero(); k * g.cout]);
        for part in iter {
            for (a, b) in dk.iter_mut().zip(part) {
                *a += b;
            }
        }
        grads.dkernel = Some(dk);
    }

    if need_dbias {
        let mut db = vec![T::zero(); g.cout];
        for row in dy.chunks(g.cout) {
            for (a, &b) in db.iter_mut().zip(row) {
                *a += b;
            }
        }
        grads.dbias = Some(db);
    }
    grads
}

/// 2× nearest-neighbour upsampling of an NHWC buffer.
pub fn upsample2x_forward<T: Element>(x: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * oh * ow * c];
    for b in 0..n {
        for y in 0..oh {
            for xx in 0..ow {
                let src = ((b * h + y / 2) * w + xx / 2) * c;
                let dst = ((b * oh + y) * ow + xx) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Element>(dy: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for y in 0..oh {
            for xx in 0..ow {
                let src = ((b * oh + y) * ow + xx) * c;
                let dst = ((b * h + y / 2) * w + xx / 2) * c;
                for (d, &s) in dx[dst..dst + c].iter_mut().zip(&dy[src..src + c]) {
                    *d += s;
                }
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance over every row of a `[rows, c]` view.
/// Accumulates in `f64`.
pub fn channel_moments<T: Element>(x: &[T], c: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / c;
    let mut mean = vec![0.0f64; c];
    for row in x.chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.f64();
        }
    }
    for m in mean.iter_mut() {
        *m /= rows as f64;
    }
    let mut var = vec![0.0f64; c];
    for row in x.chunks(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.f64() - m;
            *s += d * d;
        }
    }
    for s in var.iter_mut() {
        *s /= rows as f64;
    }
    (mean, var)
}

/// Normalises with the given statistics: returns `(y, xhat)`.
pub fn normalize<T: Element>(
    x: &[T],
    c: usize,
    mean: &[f64],
    var: &[f64],
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, Vec<T>) {
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for ((xr, yr), hr) in x.chunks(c).zip(y.chunks_mut(c)).zip(xhat.chunks_mut(c)) {
        for j in 0..c {
            let h = (xr[j].f64() - mean[j]) * inv[j];
            hr[j] = T::of(h);
            yr[j] = gamma[j] * T::of(h) + beta[j];
        }
    }
    (y, xhat)
}

/// Backward of batch-statistics normalisation.
pub fn normalize_train_backward<T: Element>(
    dy: &[T],
    xhat: &[T],
    gamma: &[T],
    var: &[f64],
    eps: f64,
    c: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = (dy.len() / c) as f64;
    let mut dbeta = vec![0.0f64; c];
    let mut dgamma = vec![0.0f64; c];
    for (dr, hr) in dy.chunks(c).zip(xhat.chunks(c)) {
        for j in 0..c {
            dbeta[j] += dr[j].f64();
            dgamma[j] += dr[j].f64() * hr[j].f64();
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for ((dr, hr), xr) in dy.chunks(c).zip(xhat.chunks(c)).zip(dx.chunks_mut(c)) {
        for j in 0..c {
            let g = gamma[j].f64();
            let inv = 1.0 / (var[j] + eps).sqrt();
            let v = g * inv / rows * (rows * dr[j].f64() - dbeta[j] - hr[j].f64() * dgamma[j]);
            xr[j] = T::of(v);
        }
    }
    (
        dx,
        dgamma.into_iter().map(T::of).collect(),
        dbeta.into_iter().map(T::of).collect(),
    )
}
