//! Ricker plane-wave evaluation and Fibonacci-lattice directions.

use super::PlaneWaveSource;
use crate::error::{Error, Result};
use std::f64::consts::PI;

/// Emitted field of a travelling Ricker plane wave:
///
/// `lambda = (1 - 2 pi^2 q0^2 tau^2) exp(-pi^2 q0^2 tau^2)`,
/// `tau = t - p.x/c - 3/(pi q0)`.
///
/// The peak value is 1, attained at `tau = 0`; the first zeros sit at
/// `tau = +-1/(sqrt(2) pi q0)`.
pub fn ricker_lambda(src: &PlaneWaveSource, point: [f64; 3], t: f64) -> f64 {
    let p = src.direction;
    let q0 = src.central_frequency;
    let tau = t
        - (p[0] * point[0] + p[1] * point[1] + p[2] * point[2]) / src.sound_speed
        - 3.0 / (PI * q0);
    let a = PI * PI * q0 * q0 * tau * tau;
    (1.0 - 2.0 * a) * (-a).exp()
}

/// `m` quasi-uniform unit vectors from the Fibonacci lattice:
///
/// `p3 = (2m - 1)/M - 1`,
/// `p1 = sqrt(1 - p3^2) cos(2 pi m phi)`,
/// `p2 = sqrt(1 - p3^2) sin(2 pi m phi)`,
///
/// with `phi = (1 + sqrt(5))/2` the golden ratio and `m = 1..=M`.
/// Deterministic and ordered by `m`.
pub fn fibonacci_directions(m: usize) -> Result<Vec<[f64; 3]>> {
    if m < 1 {
        return Err(Error::validation("direction count must be >= 1"));
    }
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let count = m as f64;
    Ok((1..=m)
        .map(|i| {
            let p3 = (2.0 * i as f64 - 1.0) / count - 1.0;
            let r = (1.0 - p3 * p3).sqrt();
            let angle = 2.0 * PI * i as f64 * phi;
            [r * angle.cos(), r * angle.sin(), p3]
        })
        .collect())
}
