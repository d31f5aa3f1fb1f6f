//! Tiny f64 building blocks for the layer kernels. The accumulation
//! patterns here are pinned: `axpy` adds terms in ascending index order and
//! `dot` uses a fixed four-lane split, so every caller inherits a
//! reduction order that does not depend on thread count or call site.

#[inline(always)]
pub(crate) fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(acc.len(), x.len());
    for (o, &v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline(always)]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let (mut s0, mut s1, mut s2, mut s3) = (0f64, 0f64, 0f64, 0f64);
    let mut i = 0;
    while i + 4 <= n {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut t = (s0 + s1) + (s2 + s3);
    while i < n {
        t += a[i] * b[i];
        i += 1;
    }
    t
}
