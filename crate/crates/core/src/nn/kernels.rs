//! Dense-layer primitives. Every weight multiply performed by a forward pass
//! goes through [`affine`], which keeps a per-thread tally used by the cost
//! model checks.

use std::cell::Cell;

thread_local! {
    static MULTIPLIES: Cell<u64> = const { Cell::new(0) };
}

/// Weight multiplies performed by forward passes on this thread.
pub fn multiply_count() -> u64 {
    MULTIPLIES.with(Cell::get)
}

pub fn reset_multiply_count() {
    MULTIPLIES.with(|c| c.set(0));
}

/// Fixed-order dot product with four partial sums.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4 * 4;
    for (x, y) in a[..chunks].chunks_exact(4).zip(b[..chunks].chunks_exact(4)) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in a[chunks..].iter().zip(&b[chunks..]) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out = W·x + bias` with `W` stored row-major as `out.len() × x.len()`.
pub fn affine(w: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), out.len() * cols);
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&w[i * cols..(i + 1) * cols], x) + bias[i];
    }
    MULTIPLIES.with(|c| c.set(c.get() + (out.len() * cols) as u64));
}

#[inline]
pub fn prelu(z: f64, slope: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        slope * z
    }
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `Concat(a, a⊙b, b)`, the fusion-unit input.
pub fn fusion_input(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(3 * a.len());
    x.extend_from_slice(a);
    x.extend(a.iter().zip(b).map(|(p, q)| p * q));
    x.extend_from_slice(b);
    x
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Two-way softmax.
pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}
