//! Small numeric helpers shared across modules.
//!
//! Reductions over large arrays are chunked with a fixed block size and the
//! block partials are folded in index order, so sums are bit-identical no
//! matter how work is scheduled across threads.

const BLOCK: usize = 4096;

/// Sum with a fixed, thread-count-independent association order.
pub fn stable_sum(values: &[f64]) -> f64 {
    values
        .chunks(BLOCK)
        .map(|c| c.iter().sum::<f64>())
        .sum::<f64>()
}

/// Dot product with the same fixed association order as [`stable_sum`].
pub fn stable_dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.chunks(BLOCK)
        .zip(b.chunks(BLOCK))
        .map(|(ca, cb)| ca.iter().zip(cb).map(|(x, y)| x * y).sum::<f64>())
        .sum::<f64>()
}

/// Squared Euclidean norm, stable association order.
pub fn stable_norm_sq(a: &[f64]) -> f64 {
    a.chunks(BLOCK)
        .map(|c| c.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
}

/// `a += alpha * b`, elementwise.
pub fn axpy(alpha: f64, b: &[f64], a: &mut [f64]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter_mut().zip(b) {
        *x += alpha * *y;
    }
}

/// `a = b + beta * a`, elementwise (the CG direction update).
pub fn xpby(b: &[f64], beta: f64, a: &mut [f64]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter_mut().zip(b) {
        *x = *y + beta * *x;
    }
}

/// Relative difference |a-b| / max(|a|,|b|), zero when both are zero.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
