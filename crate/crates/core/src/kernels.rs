//! Slice-level numeric kernels shared by the value-level ops and the tape.
//!
//! Every reduction accumulates in a fixed sequential order so results are
//! bit-identical from run to run.

use crate::tensor::Element;

/// `out[m×n] = a[m×k] · b[k×n]`, accumulated in increasing `k` order.
pub fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    matmul_into(a, b, m, k, n, vec![T::zero(); m * n])
}

/// `a·b + bias` with `bias` broadcast over rows.
pub fn matmul_bias<T: Element>(a: &[T], b: &[T], bias: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    for _ in 0..m {
        out.extend_from_slice(bias);
    }
    matmul_into(a, b, m, k, n, out)
}

/// Column sums of an `m×n` matrix, rows taken in ascending order.
pub fn column_sums<T: Element>(g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for row in g.chunks_exact(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    out
}

fn matmul_into<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, mut out: Vec<T>) -> Vec<T> {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `aᵀ·b` for `a: m×k`, `b: m×n`, without materializing the transpose.
/// Sums over `m` in ascending order, like [`matmul`] on the transpose.
pub fn matmul_tn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

pub fn transpose<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Splits a shape into `(outer, axis_len, inner)` around `axis`.
pub fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Zero-mean, unit population-variance normalization along one axis.
/// Returns the output and the per-group reciprocal std `1/sqrt(var + eps)`.
pub fn standardize<T: Element>(
    x: &[T],
    outer: usize,
    len: usize,
    inner: usize,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(outer * inner);
    let n = T::from_f64(len as f64);
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut sum = T::zero();
            for j in 0..len {
                sum = sum + x[at(j)];
            }
            let mean = sum / n;
            let mut sq = T::zero();
            for j in 0..len {
                let d = x[at(j)] - mean;
                sq = sq + d * d;
            }
            let r = T::one() / (sq / n + eps).sqrt();
            for j in 0..len {
                out[at(j)] = (x[at(j)] - mean) * r;
            }
            rstd.push(r);
        }
    }
    (out, rstd)
}

/// Vector-Jacobian product of [`standardize`]:
/// `dx = r/n · (n·dy − Σdy − y·Σ(dy·y))` per group.
pub fn standardize_backward<T: Element>(
    y: &[T],
    rstd: &[T],
    dy: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    let n = T::from_f64(len as f64);
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let r = rstd[o * inner + i];
            let mut sum_dy = T::zero();
            let mut sum_dyy = T::zero();
            for j in 0..len {
                sum_dy = sum_dy + dy[at(j)];
                sum_dyy = sum_dyy + dy[at(j)] * y[at(j)];
            }
            for j in 0..len {
                dx[at(j)] = r / n * (n * dy[at(j)] - sum_dy - y[at(j)] * sum_dyy);
            }
        }
    }
    dx
}

/// Window geometry of "same"-padded pooling: output length and the number
/// of padded positions before the first input element.
pub fn same_padding(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(len);
    (out, total / 2)
}

/// In-bounds `[start, end)` range of the window for output index `o`.
fn window(o: usize, len: usize, kernel: usize, stride: usize, pad: usize) -> (usize, usize) {
    let start = (o * stride) as isize - pad as isize;
    let end = start + kernel as isize;
    (start.max(0) as usize, end.min(len as isize) as usize)
}

/// Average pooling over an `h×w` map with same padding; padded positions
/// are excluded from each window's mean.
pub fn avg_pool2d<T: Element>(
    x: &[T],
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
) -> (Vec<T>, usize, usize) {
    let (oh, ph) = same_padding(h, kernel, stride);
    let (ow, pw) = same_padding(w, kernel, stride);
    // Row pass: sums over the column window for every input row.
    let mut row_sums = vec![T::zero(); h * ow];
    for r in 0..h {
        for oc in 0..ow {
            let (c0, c1) = window(oc, w, kernel, stride, pw);
            let mut s = T::zero();
            for c in c0..c1 {
                s = s + x[r * w + c];
            }
            row_sums[r * ow + oc] = s;
        }
    }
    let mut out = vec![T::zero(); oh * ow];
    for or in 0..oh {
        let (r0, r1) = window(or, h, kernel, stride, ph);
        for oc in 0..ow {
            let (c0, c1) = window(oc, w, kernel, stride, pw);
            let mut s = T::zero();
            for r in r0..r1 {
                s = s + row_sums[r * ow + oc];
            }
            let count = T::from_f64(((r1 - r0) * (c1 - c0)) as f64);
            out[or * ow + oc] = s / count;
        }
    }
    (out, oh, ow)
}

pub fn avg_pool2d_backward<T: Element>(
    dy: &[T],
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
) -> Vec<T> {
    let (oh, ph) = same_padding(h, kernel, stride);
    let (ow, pw) = same_padding(w, kernel, stride);
    let mut dx = vec![T::zero(); h * w];
    for or in 0..oh {
        let (r0, r1) = window(or, h, kernel, stride, ph);
        for oc in 0..ow {
            let (c0, c1) = window(oc, w, kernel, stride, pw);
            let share = dy[or * ow + oc] / T::from_f64(((r1 - r0) * (c1 - c0)) as f64);
            for r in r0..r1 {
                for c in c0..c1 {
                    dx[r * w + c] = dx[r * w + c] + share;
                }
            }
        }
    }
    dx
}

/// Source taps of align-corners-false linear interpolation along one axis:
/// `(lower index, upper index, upper weight)` for each output position.
pub fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i0 == i1 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resampling of an `h×w×c` map (c = 1 for plain 2-D maps).
pub fn bilinear<T: Element>(
    x: &[T],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let rows = linear_taps(h, oh);
    let cols = linear_taps(w, ow);
    let mut out = vec![T::zero(); oh * ow * c];
    for (orow, &(r0, r1, fr)) in rows.iter().enumerate() {
        let fr = T::from_f64(fr);
        for (ocol, &(c0, c1, fc)) in cols.iter().enumerate() {
            let fc = T::from_f64(fc);
            for ch in 0..c {
                let at = |r: usize, col: usize| x[(r * w + col) * c + ch];
                let top = at(r0, c0) + (at(r0, c1) - at(r0, c0)) * fc;
                let bottom = at(r1, c0) + (at(r1, c1) - at(r1, c0)) * fc;
                let v = top + (bottom - top) * fr;
                // Interpolation is a convex combination; clamp away rounding overshoot.
                let lo = at(r0, c0).min(at(r0, c1)).min(at(r1, c0)).min(at(r1, c1));
                let hi = at(r0, c0).max(at(r0, c1)).max(at(r1, c0)).max(at(r1, c1));
                out[(orow * ow + ocol) * c + ch] = v.max(lo).min(hi);
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Element>(
    dy: &[T],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let rows = linear_taps(h, oh);
    let cols = linear_taps(w, ow);
    let mut dx = vec![T::zero(); h * w];
    for (orow, &(r0, r1, fr)) in rows.iter().enumerate() {
        let fr = T::from_f64(fr);
        for (ocol, &(c0, c1, fc)) in cols.iter().enumerate() {
            let fc = T::from_f64(fc);
            let g = dy[orow * ow + ocol];
            let one = T::one();
            dx[r0 * w + c0] = dx[r0 * w + c0] + g * (one - fr) * (one - fc);
            dx[r0 * w + c1] = dx[r0 * w + c1] + g * (one - fr) * fc;
            dx[r1 * w + c0] = dx[r1 * w + c0] + g * fr * (one - fc);
            dx[r1 * w + c1] = dx[r1 * w + c1] + g * fr * fc;
        }
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Constants of the tanh-approximated GELU, converted once per call.
struct Gelu<T> {
    k: T,
    c: T,
    c3: T,
    half: T,
    one: T,
    two: T,
}

impl<T: Element> Gelu<T> {
    fn new() -> Self {
        Self {
            k: T::from_f64(GELU_K),
            c: T::from_f64(GELU_C),
            c3: T::from_f64(3.0 * GELU_C),
            half: T::from_f64(0.5),
            one: T::one(),
            two: T::from_f64(2.0),
        }
    }

    /// `tanh(k·(x + c·x³))` as `1 − 2/(e^{2|z|} + 1)`; libm `tanh` is several
    /// times slower and the absolute error here stays within a few ulp of 1.
    #[inline]
    fn inner(&self, x: T) -> T {
        let z = self.k * (x + self.c * x * x * x);
        let e = (self.two * z.abs()).exp();
        (self.one - self.two / (e + self.one)).copysign(z)
    }

    #[inline]
    fn value(&self, x: T) -> T {
        self.half * x * (self.one + self.inner(x))
    }

    #[inline]
    fn grad(&self, x: T) -> T {
        let t = self.inner(x);
        self.half * (self.one + t) + self.half * x * (self.one - t * t) * self.k * (self.one + self.c3 * x * x)
    }
}

/// tanh-approximated GELU.
pub fn gelu<T: Element>(x: T) -> T {
    Gelu::new().value(x)
}

pub fn gelu_grad<T: Element>(x: T) -> T {
    Gelu::new().grad(x)
}

pub fn gelu_slice<T: Element>(x: &[T]) -> Vec<T> {
    let f = Gelu::new();
    x.iter().map(|&v| f.value(v)).collect()
}

/// `g ⊙ gelu'(x)`.
pub fn gelu_backward<T: Element>(x: &[T], g: &[T]) -> Vec<T> {
    let f = Gelu::new();
    x.iter().zip(g).map(|(&v, &gi)| gi * f.grad(v)).collect()
}
