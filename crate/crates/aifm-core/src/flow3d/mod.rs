//! Dense 3D optical flow by local polynomial expansion.
//!
//! Each volume is approximated around every voxel by a quadratic model
//! `f(x + u) ~ u' A u + b' u + c` fitted with Gaussian-weighted least
//! squares. With a Gaussian applicability the normal equations have a
//! position-independent Gram matrix, so the fit reduces to ten separable
//! moment correlations plus a small solve per voxel. Displacements follow
//! from the expansion pair: for content translated by `s`
//! (`next(x) = prev(x - s)`) the models satisfy `A d = db`, which is
//! aggregated over a window and solved per voxel, coarse to fine with
//! warping in between.

use crate::error::{Error, Result};

use crate::volume::{DomainSpec, ScalarVolume, VectorVolume};
use serde::{Deserialize, Serialize};

/// Coarse-to-fine estimation parameters. Defaults follow common practice
/// for the polynomial-expansion method scaled to 3D.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub pyramid_levels: usize,
    /// Per-level downsampling ratio in (0, 1).
    pub pyramid_scale: f64,
    /// Aggregation window radius, voxels.
    pub window_radius: usize,
    /// Gaussian applicability sigma for the expansion, voxels.
    pub expansion_sigma: f64,
    pub iterations_per_level: usize,
    /// Gaussian smoothing of the flow field after each iteration, voxels
    /// (0 disables).
    pub smoothing_sigma_flow: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            pyramid_levels: 4,
            pyramid_scale: 0.5,
            window_radius: 4,
            expansion_sigma: 1.5,
            iterations_per_level: 3,
            smoothing_sigma_flow: 1.0,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels < 1 {
            return Err(Error::validation("pyramid levels must be >= 1"));
        }
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return Err(Error::validation("pyramid scale must be in (0,1)"));
        }
        if self.window_radius < 1 {
            return Err(Error::validation("window radius must be >= 1"));
        }
        if !(self.expansion_sigma > 0.0) {
            return Err(Error::validation("expansion sigma must be > 0"));
        }
        if self.iterations_per_level < 1 {
            return Err(Error::validation("iterations per level must be >= 1"));
        }
        if !(self.smoothing_sigma_flow >= 0.0) {
            return Err(Error::validation("flow smoothing sigma must be >= 0"));
        }
        Ok(())
    }

    /// Minimum grid size the expansion is defined on.
    pub fn min_dim(&self) -> usize {
        2 * (3.0 * self.expansion_sigma).ceil() as usize + 1
    }
}

/// Per-voxel quadratic expansion: symmetric `A` (xx, yy, zz, xy, xz, yz),
/// gradient `b`, constant `c0`. Stored as structure-of-arrays.
#[derive(Debug, Clone)]
pub struct PolyExpansion {
    pub dims: [usize; 3],
    /// 10 planes: c0, b1, b2, b3, a11, a22, a33, a12, a13, a23.
    pub coeffs: Vec<Vec<f64>>,
}

/// Result of flow estimation, displacement in voxels per frame interval.
#[derive(Debug, Clone)]
pub struct FlowEstimate {
    pub displacement: VectorVolume,
    /// Voxels whose aggregated system stayed singular after the
    /// regularisation floor; their update was skipped.
    pub singular_voxels: usize,
}

/// Normalised Gaussian kernel and its first/second moment kernels.
fn moment_kernels(sigma: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, usize) {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut g = Vec::with_capacity(2 * radius + 1);
    for k in -(radius as isize)..=(radius as isize) {
        g.push((-(k * k) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = g.iter().sum();
    for v in g.iter_mut() {
        *v /= norm;
    }
    let xg: Vec<f64> = g
        .iter()
        .enumerate()
        .map(|(i, &v)| (i as isize - radius as isize) as f64 * v)
        .collect();
    let xxg: Vec<f64> = g
        .iter()
        .enumerate()
        .map(|(i, &v)| ((i as isize - radius as isize) as f64).powi(2) * v)
        .collect();
    (g, xg, xxg, radius)
}

/// 1D correlation along `axis` with replicate-edge handling:
/// `out[i] = sum_k kern[k + r] * in[clamp(i + k)]`.
fn correlate_axis(
    input: &[f64],
    dims: [usize; 3],
    axis: usize,
    kernel: &[f64],
    radius: usize,
    out: &mut [f64],
) {
    let [n1, n2, n3] = dims;
    let n_axis = dims[axis];
    let stride = match axis {
        0 => n2 * n3,
        1 => n3,
        _ => 1,
    };
    let (na, nb) = match axis {
        0 => (n2, n3),
        1 => (n1, n3),
        _ => (n1, n2),
    };
    for a in 0..na {
        for b in 0..nb {
            let start = match axis {
                0 => a * n3 + b,
                1 => a * n2 * n3 + b,
                _ => a * n2 * n3 + b * n3,
            };
            for i in 0..n_axis {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let j = (i as isize + ki as isize - radius as isize)
                        .clamp(0, n_axis as isize - 1) as usize;
                    acc += kv * input[start + j * stride];
                }
                out[start + i * stride] = acc;
            }
        }
    }
}

/// Fit the quadratic model at every voxel of `vol`; coefficients are in
/// voxel coordinates relative to each voxel centre. Exact for globally
/// quadratic inputs away from the borders.
pub fn poly_expansion(vol: &ScalarVolume, sigma: f64) -> Result<PolyExpansion> {
    let dims = vol.domain.dims();
    let (g, xg, xxg, radius) = moment_kernels(sigma);
    let min_dim = 2 * radius + 1;
    if dims.iter().any(|&n| n < min_dim) {
        return Err(Error::validation(format!(
            "volume dims {dims:?} too small for expansion radius {radius} \
             (need >= {min_dim} per axis)"
        )));
    }
    let n = vol.values.len();
    // degree-tagged passes: axis 3 first, then 2, then 1
    let kern = |d: usize| -> (&[f64], &[f64]) {
        match d {
            0 => (&g, &g),
            1 => (&xg, &xg),
            _ => (&xxg, &xxg),
        }
    };
    let mut t = vec![vec![0.0; n]; 3]; // by d3
    for (d3, buf) in t.iter_mut().enumerate() {
        correlate_axis(&vol.values, dims, 2, kern(d3).0, radius, buf);
    }
    // (d2, d3) with d2 + d3 <= 2
    let pairs: [(usize, usize); 6] = [(0, 0), (1, 0), (2, 0), (0, 1), (1, 1), (0, 2)];
    let mut u = vec![vec![0.0; n]; 6];
    for (slot, &(d2, d3)) in pairs.iter().enumerate() {
        correlate_axis(&t[d3], dims, 1, kern(d2).0, radius, &mut u[slot]);
    }
    let pair_slot = |d2: usize, d3: usize| pairs.iter().position(|&p| p == (d2, d3)).unwrap();
    // final (d1, d2, d3) moments
    let triples: [(usize, usize, usize); 10] = [
        (0, 0, 0),
        (1, 0, 0),
        (0, 1, 0),
        (0, 0, 1),
        (2, 0, 0),
        (0, 2, 0),
        (0, 0, 2),
        (1, 1, 0),
        (1, 0, 1),
        (0, 1, 1),
    ];
    let mut m = vec![vec![0.0; n]; 10];
    for (slot, &(d1, d2, d3)) in triples.iter().enumerate() {
        correlate_axis(&u[pair_slot(d2, d3)], dims, 0, kern(d1).0, radius, &mut m[slot]);
    }

    // Gram-matrix scalars of the normalised separable applicability.
    let m2: f64 = g
        .iter()
        .enumerate()
        .map(|(i, &v)| ((i as isize - radius as isize) as f64).powi(2) * v)
        .sum();
    let m4: f64 = g
        .iter()
        .enumerate()
        .map(|(i, &v)| ((i as isize - radius as isize) as f64).powi(4) * v)
        .sum();
    // (c0, a11, a22, a33) couple through a symmetric 4x4 system.
    let gram = [
        [1.0, m2, m2, m2],
        [m2, m4, m2 * m2, m2 * m2],
        [m2, m2 * m2, m4, m2 * m2],
        [m2, m2 * m2, m2 * m2, m4],
    ];
    let inv4 = invert4(&gram).ok_or_else(|| {
        Error::validation(format!("degenerate applicability (sigma {sigma})"))
    })?;

    let mut coeffs = vec![vec![0.0; n]; 10];
    for i in 0..n {
        let rhs = [m[0][i], m[4][i], m[5][i], m[6][i]];
        let mut sol = [0.0; 4];
        for (r, row) in inv4.iter().enumerate() {
            sol[r] = row[0] * rhs[0] + row[1] * rhs[1] + row[2] * rhs[2] + row[3] * rhs[3];
        }
        coeffs[0][i] = sol[0]; // c0
        coeffs[1][i] = m[1][i] / m2; // b1
        coeffs[2][i] = m[2][i] / m2; // b2
        coeffs[3][i] = m[3][i] / m2; // b3
        coeffs[4][i] = sol[1]; // a11
        coeffs[5][i] = sol[2]; // a22
        coeffs[6][i] = sol[3]; // a33
        // monomial coefficient of x_i x_j is 2 A_ij
        coeffs[7][i] = m[7][i] / (m2 * m2) / 2.0; // a12
        coeffs[8][i] = m[8][i] / (m2 * m2) / 2.0; // a13
        coeffs[9][i] = m[9][i] / (m2 * m2) / 2.0; // a23
    }
    Ok(PolyExpansion { dims, coeffs })
}

fn invert4(a: &[[f64; 4]; 4]) -> Option<[[f64; 4]; 4]> {
    // Gauss-Jordan with partial pivoting on an augmented matrix.
    let mut aug = [[0.0; 8]; 4];
    for i in 0..4 {
        aug[i][..4].copy_from_slice(&a[i]);
        aug[i][4 + i] = 1.0;
    }
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| {
            aug[i][col].abs().partial_cmp(&aug[j][col].abs()).unwrap()
        })?;
        if aug[pivot][col].abs() < 1e-300 {
            return None;
        }
        aug.swap(col, pivot);
        let d = aug[col][col];
        for v in aug[col].iter_mut() {
            *v /= d;
        }
        for row in 0..4 {
            if row != col {
                let factor = aug[row][col];
                for k in 0..8 {
                    aug[row][k] -= factor * aug[col][k];
                }
            }
        }
    }
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        out[i].copy_from_slice(&aug[i][4..]);
    }
    Some(out)
}

/// Trilinear sample of one expansion plane at voxel coordinates `p`
/// (clamped to the grid).
fn sample_plane(plane: &[f64], dims: [usize; 3], p: [f64; 3]) -> f64 {
    let [n1, n2, n3] = dims;
    let clamped = [
        p[0].clamp(0.0, (n1 - 1) as f64),
        p[1].clamp(0.0, (n2 - 1) as f64),
        p[2].clamp(0.0, (n3 - 1) as f64),
    ];
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let n = dims[a];
        let mut i = clamped[a].floor() as usize;
        if i + 1 >= n {
            i = n - 2;
        }
        base[a] = i;
        frac[a] = clamped[a] - i as f64;
    }
    let idx = |i1: usize, i2: usize, i3: usize| i3 + n3 * (i2 + n2 * i1);
    let mut acc = 0.0;
    for (c1, w1) in [(0, 1.0 - frac[0]), (1, frac[0])] {
        for (c2, w2) in [(0, 1.0 - frac[1]), (1, frac[1])] {
            for (c3, w3) in [(0, 1.0 - frac[2]), (1, frac[2])] {
                acc += w1 * w2 * w3 * plane[idx(base[0] + c1, base[1] + c2, base[2] + c3)];
            }
        }
    }
    acc
}

/// Gaussian blur of a flat plane, in place, sigma in voxels.
fn blur_plane(plane: &mut Vec<f64>, dims: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let (g, _, _, radius) = moment_kernels(sigma);
    let mut scratch = vec![0.0; plane.len()];
    for axis in 0..3 {
        correlate_axis(plane, dims, axis, &g, radius, &mut scratch);
        std::mem::swap(plane, &mut scratch);
    }
}

/// Resample a displacement field to new dims, rescaling the vectors by the
/// per-axis grid ratio.
fn upsample_flow(flow: &[Vec<f64>; 3], from: [usize; 3], to: [usize; 3]) -> [Vec<f64>; 3] {
    let n = to[0] * to[1] * to[2];
    let mut out = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let ratio = [
        (to[0] - 1) as f64 / (from[0] - 1) as f64,
        (to[1] - 1) as f64 / (from[1] - 1) as f64,
        (to[2] - 1) as f64 / (from[2] - 1) as f64,
    ];
    for i1 in 0..to[0] {
        for i2 in 0..to[1] {
            for i3 in 0..to[2] {
                let p = [
                    i1 as f64 / ratio[0],
                    i2 as f64 / ratio[1],
                    i3 as f64 / ratio[2],
                ];
                let idx = i3 + to[2] * (i2 + to[1] * i1);
                for a in 0..3 {
                    out[a][idx] = sample_plane(&flow[a], from, p) * ratio[a];
                }
            }
        }
    }
    out
}

/// Downsample a volume by `scale`: Gaussian presmooth then trilinear
/// resample onto `round((n-1) * scale) + 1` nodes per axis.
fn downsample(values: &[f64], dims: [usize; 3], scale: f64) -> (Vec<f64>, [usize; 3]) {
    let to = [
        (((dims[0] - 1) as f64) * scale).round() as usize + 1,
        (((dims[1] - 1) as f64) * scale).round() as usize + 1,
        (((dims[2] - 1) as f64) * scale).round() as usize + 1,
    ];
    let sigma = 0.6 * (1.0 / (scale * scale) - 1.0).sqrt();
    let mut smoothed = values.to_vec();
    blur_plane(&mut smoothed, dims, sigma);
    let ratio = [
        (dims[0] - 1) as f64 / (to[0] - 1) as f64,
        (dims[1] - 1) as f64 / (to[1] - 1) as f64,
        (dims[2] - 1) as f64 / (to[2] - 1) as f64,
    ];
    let mut out = vec![0.0; to[0] * to[1] * to[2]];
    for i1 in 0..to[0] {
        for i2 in 0..to[1] {
            for i3 in 0..to[2] {
                let p = [
                    i1 as f64 * ratio[0],
                    i2 as f64 * ratio[1],
                    i3 as f64 * ratio[2],
                ];
                out[i3 + to[2] * (i2 + to[1] * i1)] = sample_plane(&smoothed, dims, p);
            }
        }
    }
    (out, to)
}

/// Dense displacement field `d` with `next(x) ~ prev(x - d(x))`, in voxel
/// units of the input grid, estimated coarse to fine.
pub fn estimate_flow(
    prev: &ScalarVolume,
    next: &ScalarVolume,
    params: &FlowParams,
) -> Result<FlowEstimate> {
    params.validate()?;
    if !prev.domain.same_grid(&next.domain) {
        return Err(Error::validation("flow inputs must share one grid"));
    }
    let dims0 = prev.domain.dims();
    let min_dim = params.min_dim();
    if dims0.iter().any(|&n| n < min_dim) {
        return Err(Error::validation(format!(
            "volume dims {dims0:?} below expansion minimum {min_dim}"
        )));
    }

    // pyramid, finest first; deeper levels are dropped once any axis would
    // fall below the expansion minimum
    let mut levels: Vec<(Vec<f64>, Vec<f64>, [usize; 3])> =
        vec![(prev.values.clone(), next.values.clone(), dims0)];
    for _ in 1..params.pyramid_levels {
        let (pv, nv, d) = levels.last().unwrap();
        let (p_dn, d_new) = downsample(pv, *d, params.pyramid_scale);
        if d_new.iter().any(|&n| n < min_dim) {
            break;
        }
        let (n_dn, _) = downsample(nv, *d, params.pyramid_scale);
        levels.push((p_dn, n_dn, d_new));
    }

    let mut flow: Option<[Vec<f64>; 3]> = None;
    let mut flow_dims = [0usize; 3];
    let mut singular_voxels = 0usize;
    let win_sigma = params.window_radius as f64 / 2.0;
    let (win_kernel, _, _, win_radius) = moment_kernels(win_sigma.max(0.5));

    for (pv, nv, dims) in levels.iter().rev() {
        let dims = *dims;
        let n = dims[0] * dims[1] * dims[2];
        let mut d = match flow.take() {
            Some(f) => upsample_flow(&f, flow_dims, dims),
            None => [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        };
        flow_dims = dims;
        let pvol = ScalarVolume::from_values(grid_of(dims), pv.clone())?;
        let nvol = ScalarVolume::from_values(grid_of(dims), nv.clone())?;
        let e_prev = poly_expansion(&pvol, params.expansion_sigma)?;
        let e_next = poly_expansion(&nvol, params.expansion_sigma)?;

        for _ in 0..params.iterations_per_level {
            singular_voxels = 0;
            // per-voxel aggregated system: M (6 sym entries) and h (3)
            let mut m_planes = vec![vec![0.0; n]; 6];
            let mut h_planes = vec![vec![0.0; n]; 3];
            for i1 in 0..dims[0] {
                for i2 in 0..dims[1] {
                    for i3 in 0..dims[2] {
                        let idx = i3 + dims[2] * (i2 + dims[1] * i1);
                        let warp = [
                            i1 as f64 - d[0][idx],
                            i2 as f64 - d[1][idx],
                            i3 as f64 - d[2][idx],
                        ];
                        // averaged quadratic part and model mismatch
                        let mut a = [0.0f64; 6]; // a11 a22 a33 a12 a13 a23
                        for (slot, k) in [(0, 4), (1, 5), (2, 6), (3, 7), (4, 8), (5, 9)] {
                            a[slot] = 0.5
                                * (sample_plane(&e_prev.coeffs[k], dims, warp)
                                    + e_next.coeffs[k][idx]);
                        }
                        let mut db = [0.0f64; 3];
                        for (slot, k) in [(0, 1), (1, 2), (2, 3)] {
                            db[slot] = -0.5
                                * (e_next.coeffs[k][idx]
                                    - sample_plane(&e_prev.coeffs[k], dims, warp));
                        }
                        // A as a symmetric 3x3
                        let arr = [
                            [a[0], a[3], a[4]],
                            [a[3], a[1], a[5]],
                            [a[4], a[5], a[2]],
                        ];
                        // M = A' A, h = A' db
                        let mut mm = [0.0; 6];
                        let mut hh = [0.0; 3];
                        let cols = |r: usize, c: usize| -> f64 {
                            (0..3).map(|k| arr[k][r] * arr[k][c]).sum()
                        };
                        mm[0] = cols(0, 0);
                        mm[1] = cols(1, 1);
                        mm[2] = cols(2, 2);
                        mm[3] = cols(0, 1);
                        mm[4] = cols(0, 2);
                        mm[5] = cols(1, 2);
                        for r in 0..3 {
                            hh[r] = (0..3).map(|k| arr[k][r] * db[k]).sum();
                        }
                        for (plane, v) in m_planes.iter_mut().zip(mm) {
                            plane[idx] = v;
                        }
                        for (plane, v) in h_planes.iter_mut().zip(hh) {
                            plane[idx] = v;
                        }
                    }
                }
            }
            // window aggregation
            let mut scratch = vec![0.0; n];
            for plane in m_planes.iter_mut().chain(h_planes.iter_mut()) {
                for axis in 0..3 {
                    correlate_axis(plane, dims, axis, &win_kernel, win_radius, &mut scratch);
                    std::mem::swap(plane, &mut scratch);
                }
            }
            // solve (G + eps I) delta = h per voxel
            for idx in 0..n {
                let g = [
                    [m_planes[0][idx], m_planes[3][idx], m_planes[4][idx]],
                    [m_planes[3][idx], m_planes[1][idx], m_planes[5][idx]],
                    [m_planes[4][idx], m_planes[5][idx], m_planes[2][idx]],
                ];
                let h = [h_planes[0][idx], h_planes[1][idx], h_planes[2][idx]];
                let trace = g[0][0] + g[1][1] + g[2][2];
                let eps = 1e-6 * trace;
                match solve3(&g, eps, &h) {
                    Some(delta) => {
                        d[0][idx] += delta[0];
                        d[1][idx] += delta[1];
                        d[2][idx] += delta[2];
                    }
                    None => singular_voxels += 1,
                }
            }
            if params.smoothing_sigma_flow > 0.0 {
                for plane in d.iter_mut() {
                    blur_plane(plane, dims, params.smoothing_sigma_flow);
                }
            }
        }
        flow = Some(d);
    }

    let d = flow.unwrap();
    let mut displacement = VectorVolume::zeros(prev.domain);
    for a in 0..3 {
        displacement.components[a].values = d[a].clone();
    }
    Ok(FlowEstimate {
        displacement,
        singular_voxels,
    })
}

/// Unit-spacing grid descriptor for internal pyramid levels.
fn grid_of(dims: [usize; 3]) -> DomainSpec {
    DomainSpec {
        extent: [
            (dims[0] - 1) as f64,
            (dims[1] - 1) as f64,
            (dims[2] - 1) as f64,
        ],
        spacing: 1.0,
        origin: [0.0; 3],
    }
}

/// Solve `(G + eps I) x = h` for symmetric 3x3 `G`; `None` when singular.
fn solve3(g: &[[f64; 3]; 3], eps: f64, h: &[f64; 3]) -> Option<[f64; 3]> {
    let a = [
        [g[0][0] + eps, g[0][1], g[0][2]],
        [g[1][0], g[1][1] + eps, g[1][2]],
        [g[2][0], g[2][1], g[2][2] + eps],
    ];
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    if !(det.abs() > 1e-30 * scale.powi(3).max(1e-300)) {
        return None;
    }
    let inv_det = 1.0 / det;
    let x = [
        (h[0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            - a[0][1] * (h[1] * a[2][2] - a[1][2] * h[2])
            + a[0][2] * (h[1] * a[2][1] - a[1][1] * h[2]))
            * inv_det,
        (a[0][0] * (h[1] * a[2][2] - a[1][2] * h[2])
            - h[0] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * h[2] - h[1] * a[2][0]))
            * inv_det,
        (a[0][0] * (a[1][1] * h[2] - h[1] * a[2][1])
            - a[0][1] * (a[1][0] * h[2] - h[1] * a[2][0])
            + h[0] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]))
            * inv_det,
    ];
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

/// Convert displacement (voxels per frame) to velocity (m/s).
pub fn displacement_to_velocity(
    displacement: &VectorVolume,
    spacing: f64,
    interval: f64,
) -> Result<VectorVolume> {
    if !(interval > 0.0) {
        return Err(Error::validation("frame interval must be > 0"));
    }
    let mut out = displacement.clone();
    let factor = spacing / interval;
    for comp in out.components.iter_mut() {
        for v in comp.values.iter_mut() {
            *v *= factor;
        }
    }
    Ok(out)
}

/// Clamp to non-negative and normalise the maximum to 1; flow estimation
/// input conditioning so reconstruction amplitude does not matter.
pub fn normalize_for_flow(vol: &ScalarVolume) -> ScalarVolume {
    let mut out = vol.clone();
    for v in out.values.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let max = out.max_value();
    if max > 0.0 {
        for v in out.values.iter_mut() {
            *v /= max;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rel_diff;

    fn unit_domain(n: usize) -> DomainSpec {
        DomainSpec::with_extent([(n - 1) as f64; 3], 1.0).unwrap()
    }

    /// Periodic lattice of Gaussian blobs; smooth enough to survive the
    /// pyramid, textured enough for the window aggregation.
    fn test_pattern(dims: [usize; 3], shift: [f64; 3]) -> ScalarVolume {
        let domain = DomainSpec {
            extent: [
                (dims[0] - 1) as f64,
                (dims[1] - 1) as f64,
                (dims[2] - 1) as f64,
            ],
            spacing: 1.0,
            origin: [0.0; 3],
        };
        let period = 11.0;
        let sigma = 1.8;
        ScalarVolume::from_fn(domain, |p| {
            let mut r2 = 0.0;
            for a in 0..3 {
                let q = (p[a] - shift[a]).rem_euclid(period);
                let d = q.min(period - q);
                r2 += d * d;
            }
            (-r2 / (2.0 * sigma * sigma)).exp()
        })
    }

    #[test]
    fn expansion_constant_volume() {
        let d = unit_domain(15);
        let v = ScalarVolume::from_fn(d, |_| 3.25);
        let e = poly_expansion(&v, 1.5).unwrap();
        let idx = d.offset(7, 7, 7);
        assert!((e.coeffs[0][idx] - 3.25).abs() < 1e-9);
        for k in 1..10 {
            assert!(e.coeffs[k][idx].abs() < 1e-9, "plane {k}");
        }
    }

    #[test]
    fn expansion_linear_volume() {
        let d = unit_domain(15);
        let v = ScalarVolume::from_fn(d, |p| p[1]);
        let e = poly_expansion(&v, 1.5).unwrap();
        let idx = d.offset(7, 6, 8);
        assert!((e.coeffs[2][idx] - 1.0).abs() < 1e-8, "b2");
        assert!(e.coeffs[1][idx].abs() < 1e-8);
        assert!(e.coeffs[3][idx].abs() < 1e-8);
        for k in 4..10 {
            assert!(e.coeffs[k][idx].abs() < 1e-8, "plane {k}");
        }
    }

    #[test]
    fn expansion_quadratic_volume() {
        let d = unit_domain(15);
        // global x1^2 about the domain centre to stay border-safe
        let v = ScalarVolume::from_fn(d, |p| (p[0] - 7.0) * (p[0] - 7.0));
        let e = poly_expansion(&v, 1.5).unwrap();
        // local model at voxel (i1, .) in local coords u: (u + (i1-7))^2
        for (i1, i2, i3) in [(7, 7, 7), (6, 8, 7), (9, 5, 6)] {
            let idx = d.offset(i1, i2, i3);
            let off = i1 as f64 - 7.0;
            assert!((e.coeffs[4][idx] - 1.0).abs() < 1e-6, "a11 at {i1}");
            assert!((e.coeffs[1][idx] - 2.0 * off).abs() < 1e-6, "b1 at {i1}");
            assert!((e.coeffs[0][idx] - off * off).abs() < 1e-6, "c0 at {i1}");
            assert!(e.coeffs[5][idx].abs() < 1e-6);
            assert!(e.coeffs[7][idx].abs() < 1e-6);
        }
    }

    #[test]
    fn expansion_matches_dense_least_squares() {
        // Oracle: explicit weighted normal equations over the full window,
        // solved densely at a handful of voxels.
        let d = unit_domain(17);
        let v = ScalarVolume::from_fn(d, |p| {
            (0.3 * p[0]).sin() + 0.2 * p[1] * p[2] / 16.0 + 0.05 * p[0] * p[0]
        });
        let sigma = 1.5;
        let e = poly_expansion(&v, sigma).unwrap();
        let (g, _, _, radius) = moment_kernels(sigma);
        let r = radius as isize;
        for &(c1, c2, c3) in &[(8usize, 8usize, 8usize), (7, 9, 6), (9, 6, 9)] {
            // basis: 1, u1, u2, u3, u1^2, u2^2, u3^2, u1u2, u1u3, u2u3
            let mut gram = [[0.0f64; 10]; 10];
            let mut rhs = [0.0f64; 10];
            for k1 in -r..=r {
                for k2 in -r..=r {
                    for k3 in -r..=r {
                        let w = g[(k1 + r) as usize] * g[(k2 + r) as usize] * g[(k3 + r) as usize];
                        let (u1, u2, u3) = (k1 as f64, k2 as f64, k3 as f64);
                        let basis = [
                            1.0,
                            u1,
                            u2,
                            u3,
                            u1 * u1,
                            u2 * u2,
                            u3 * u3,
                            u1 * u2,
                            u1 * u3,
                            u2 * u3,
                        ];
                        let val = v.get(
                            (c1 as isize + k1) as usize,
                            (c2 as isize + k2) as usize,
                            (c3 as isize + k3) as usize,
                        );
                        for i in 0..10 {
                            rhs[i] += w * basis[i] * val;
                            for j in 0..10 {
                                gram[i][j] += w * basis[i] * basis[j];
                            }
                        }
                    }
                }
            }
            let sol = solve10(&gram, &rhs);
            let idx = d.offset(c1, c2, c3);
            // planes: c0 b1 b2 b3 a11 a22 a33 a12 a13 a23; the dense basis
            // uses monomials, so cross terms halve.
            let got = [
                e.coeffs[0][idx],
                e.coeffs[1][idx],
                e.coeffs[2][idx],
                e.coeffs[3][idx],
                e.coeffs[4][idx],
                e.coeffs[5][idx],
                e.coeffs[6][idx],
                2.0 * e.coeffs[7][idx],
                2.0 * e.coeffs[8][idx],
                2.0 * e.coeffs[9][idx],
            ];
            for (k, (a, b)) in got.iter().zip(&sol).enumerate() {
                assert!(
                    (a - b).abs() < 1e-9 * (1.0 + b.abs()),
                    "voxel ({c1},{c2},{c3}) coeff {k}: separable {a} vs dense {b}"
                );
            }
        }
    }

    fn solve10(a: &[[f64; 10]; 10], b: &[f64; 10]) -> [f64; 10] {
        let mut m = *a;
        let mut rhs = *b;
        for col in 0..10 {
            let pivot = (col..10)
                .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
                .unwrap();
            m.swap(col, pivot);
            rhs.swap(col, pivot);
            let d = m[col][col];
            for v in m[col].iter_mut() {
                *v /= d;
            }
            rhs[col] /= d;
            for row in 0..10 {
                if row != col {
                    let f = m[row][col];
                    for k in 0..10 {
                        m[row][k] -= f * m[col][k];
                    }
                    rhs[row] -= f * rhs[col];
                }
            }
        }
        rhs
    }

    #[test]
    fn expansion_rejects_small_volumes() {
        let d = unit_domain(7);
        let v = ScalarVolume::zeros(d);
        assert!(poly_expansion(&v, 1.5).is_err());
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let v = test_pattern([25, 25, 25], [0.0; 3]);
        let est = estimate_flow(&v, &v, &FlowParams::default()).unwrap();
        for comp in &est.displacement.components {
            for &x in &comp.values {
                assert!(x.abs() <= 1e-6, "flow {x} on identical frames");
            }
        }
    }

    fn mean_interior(est: &VectorVolume, border: usize) -> [f64; 3] {
        let [n1, n2, n3] = est.domain.dims();
        let mut acc = [0.0; 3];
        let mut count = 0.0;
        for i1 in border..n1 - border {
            for i2 in border..n2 - border {
                for i3 in border..n3 - border {
                    let off = est.domain.offset(i1, i2, i3);
                    for a in 0..3 {
                        acc[a] += est.components[a].values[off];
                    }
                    count += 1.0;
                }
            }
        }
        [acc[0] / count, acc[1] / count, acc[2] / count]
    }

    #[test]
    fn integer_shift_recovered() {
        let dims = [33, 33, 33];
        let prev = test_pattern(dims, [0.0; 3]);
        let next = test_pattern(dims, [2.0, 0.0, 0.0]); // next(x) = prev(x - s)
        let est = estimate_flow(&prev, &next, &FlowParams::default()).unwrap();
        let mean = mean_interior(&est.displacement, 4);
        assert!((mean[0] - 2.0).abs() < 0.2, "mean {mean:?}");
        assert!(mean[1].abs() < 0.2 && mean[2].abs() < 0.2, "mean {mean:?}");
    }

    #[test]
    fn subvoxel_shift_recovered() {
        let dims = [33, 33, 33];
        let prev = test_pattern(dims, [0.0; 3]);
        let next = test_pattern(dims, [0.5, 0.5, 0.0]);
        let est = estimate_flow(&prev, &next, &FlowParams::default()).unwrap();
        let mean = mean_interior(&est.displacement, 4);
        assert!(
            (mean[0] - 0.5).abs() < 0.25 && (mean[1] - 0.5).abs() < 0.25,
            "mean {mean:?}"
        );
        assert!(mean[2].abs() < 0.25, "mean {mean:?}");
    }

    #[test]
    fn axis_transpose_equivariance() {
        // Swapping axes 1 and 2 of both volumes must swap the flow
        // components the same way.
        let dims = [21, 21, 21];
        let prev = test_pattern(dims, [0.0; 3]);
        let next = test_pattern(dims, [1.0, 0.5, 0.0]);
        let transpose = |v: &ScalarVolume| -> ScalarVolume {
            let mut out = ScalarVolume::zeros(v.domain);
            for i1 in 0..dims[0] {
                for i2 in 0..dims[1] {
                    for i3 in 0..dims[2] {
                        out.set(i2, i1, i3, v.get(i1, i2, i3));
                    }
                }
            }
            out
        };
        let params = FlowParams::default();
        let a = estimate_flow(&prev, &next, &params).unwrap().displacement;
        let b = estimate_flow(&transpose(&prev), &transpose(&next), &params)
            .unwrap()
            .displacement;
        for i1 in 0..dims[0] {
            for i2 in 0..dims[1] {
                for i3 in 0..dims[2] {
                    let oa = a.domain.offset(i1, i2, i3);
                    let ob = b.domain.offset(i2, i1, i3);
                    let pairs = [
                        (a.components[0].values[oa], b.components[1].values[ob]),
                        (a.components[1].values[oa], b.components[0].values[ob]),
                        (a.components[2].values[oa], b.components[2].values[ob]),
                    ];
                    for (x, y) in pairs {
                        assert!(
                            (x - y).abs() <= 1e-9 * (1.0 + x.abs()),
                            "transpose mismatch at ({i1},{i2},{i3}): {x} vs {y}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn displacement_to_velocity_scaling() {
        let d = unit_domain(9);
        let mut disp = VectorVolume::zeros(d);
        for v in disp.components[0].values.iter_mut() {
            *v = 1.0;
        }
        let vel = displacement_to_velocity(&disp, 0.01, 1.0).unwrap();
        assert!(vel.components[0].values.iter().all(|&v| (v - 0.01).abs() < 1e-15));
        let vel2 = displacement_to_velocity(&disp, 0.01, 0.5).unwrap();
        assert!(vel2.components[0].values.iter().all(|&v| (v - 0.02).abs() < 1e-15));
        // the reference displacement scale: 100 voxels at 1 cm over 1 s is 1 m/s
        let mut disp100 = VectorVolume::zeros(d);
        for v in disp100.components[1].values.iter_mut() {
            *v = 100.0;
        }
        let vel3 = displacement_to_velocity(&disp100, 0.01, 1.0).unwrap();
        assert!(vel3.components[1].values.iter().all(|&v| rel_diff(v, 1.0) < 1e-12));
    }

    #[test]
    fn averaging_pairs_reduces_error() {
        // Nine noisy frame pairs, all shifted by the same truth; the mean
        // over pairs must beat the average single-pair error.
        let dims = [25, 25, 25];
        let truth = [1.0, 0.0, 0.0];
        let noisy = |shift: f64, seed: u64| -> ScalarVolume {
            let mut v = test_pattern(dims, [shift, 0.0, 0.0]);
            let mut s = seed;
            for val in v.values.iter_mut() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                *val += 0.02 * (((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5);
            }
            v
        };
        let params = FlowParams::default();
        let mut pair_errors = Vec::new();
        let mut acc = [0.0; 3];
        for k in 0..9 {
            let prev = noisy(k as f64 * truth[0], 1000 + k);
            let next = noisy((k + 1) as f64 * truth[0], 2000 + k);
            let est = estimate_flow(&prev, &next, &params).unwrap();
            let mean = mean_interior(&est.displacement, 4);
            for a in 0..3 {
                acc[a] += mean[a] / 9.0;
            }
            let err: f64 = (0..3)
                .map(|a| (mean[a] - truth[a]).powi(2))
                .sum::<f64>()
                .sqrt();
            pair_errors.push(err);
        }
        let avg_err: f64 = (0..3)
            .map(|a| (acc[a] - truth[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        let mean_pair_err = pair_errors.iter().sum::<f64>() / 9.0;
        assert!(
            avg_err <= mean_pair_err + 1e-12,
            "averaged error {avg_err} vs mean single-pair error {mean_pair_err}"
        );
    }
}
