//! Explicit leapfrog solver for `(1/c^2) u_tt - lap(u) = lambda(x,t) f(x)`
//! on a box, with the free surface (`x3 = L3`) pressure-release and all
//! other faces rigid.
//!
//! Boundary conditions are realised by folding ghost-cell reflections into
//! per-row stencil coefficients: an even fold across rigid faces, an odd
//! fold (plus a zeroed row/column) across the free surface. The folded
//! operator is assembled once per axis, and its exact transpose is derived
//! from it, so the backward-in-time solve used for gradients is the exact
//! transpose of the forward map. `adjoint` verifies against `forward_all`
//! through the dot-product identity
//! `dt * <A f, w> = h^3 * <f, A* w>`.
//!
//! Each time step of the forward map, with `Z` zeroing the free-surface
//! plane, `D` the optional sponge damping and `K = dt^2 c^2`:
//!
//! ```text
//! u[n+1] = D Z (2 u[n] - u[n-1] + K (L u[n] + lambda(., n dt) f))
//! trace[s, n] = sample(u[n+1], r_s)
//! ```

use super::{PlaneWaveSource, ReceiverArray, SolverConfig, SourceSet, TraceSet};
use crate::error::{Error, Result};
use crate::volume::{trilinear_stencil, DomainSpec, ScalarVolume};
use rayon::prelude::*;

/// How often the forward loop scans for non-finite values.
const FINITE_CHECK_STRIDE: usize = 64;

/// Exponential damping layer on the two `x2` truncation faces, for
/// strip-like runs. Off by default.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpongeConfig {
    /// Layer width, metres.
    pub width: f64,
    /// Peak damping rate at the face, 1/s.
    pub strength: f64,
}

/// One boundary condition per face of one axis.
#[derive(Debug, Clone, Copy, PartialEq)]
enum FaceBc {
    /// Even ghost reflection (rigid wall / bed).
    Neumann,
    /// Odd ghost reflection about a zero-pinned plane (free surface).
    Dirichlet,
}

/// Second-derivative coefficients `c_0..c_g` for the centred stencil of a
/// given order, to be divided by h^2.
fn stencil_coeffs(order: usize) -> Vec<f64> {
    match order {
        2 => vec![-2.0, 1.0],
        4 => vec![-5.0 / 2.0, 4.0 / 3.0, -1.0 / 12.0],
        8 => vec![
            -205.0 / 72.0,
            8.0 / 5.0,
            -1.0 / 5.0,
            8.0 / 315.0,
            -1.0 / 560.0,
        ],
        _ => unreachable!("validated spatial order"),
    }
}

/// Banded 1D operator with boundary-specialised rows.
///
/// Rows inside `uniform` use the symmetric interior coefficients; the rest
/// carry explicit (column, coefficient) taps produced by folding. `taps`
/// additionally materialises every row for the fused volume kernel.
#[derive(Debug, Clone)]
struct AxisOp {
    n: usize,
    half: usize,
    /// Interior coefficients, length `2*half + 1`, centre at `half`.
    base: Vec<f64>,
    /// Row range that uses `base` with all taps in range.
    uniform: std::ops::Range<usize>,
    special: Vec<(usize, Vec<(usize, f64)>)>,
    /// Per-row (column, coefficient) taps, all rows.
    taps: Vec<Vec<(usize, f64)>>,
}

impl AxisOp {
    /// Assemble the folded forward rows.
    fn rows(n: usize, coeffs: &[f64], inv_h2: f64, low: FaceBc, high: FaceBc) -> Vec<Vec<f64>> {
        let g = coeffs.len() - 1;
        let mut rows = vec![vec![0.0; n]; n];
        for (i, row) in rows.iter_mut().enumerate() {
            if high == FaceBc::Dirichlet && i == n - 1 {
                continue; // pinned plane: zero row
            }
            for k in -(g as isize)..=(g as isize) {
                let c = coeffs[k.unsigned_abs()] * inv_h2;
                let j = i as isize + k;
                if j < 0 {
                    match low {
                        FaceBc::Neumann => row[(-j) as usize] += c,
                        FaceBc::Dirichlet => {
                            // mirror about node 0, whose value is pinned to zero
                            if j < 0 {
                                row[(-j) as usize] -= c;
                            }
                        }
                    }
                } else if j as usize > n - 1 {
                    match high {
                        FaceBc::Neumann => row[2 * (n - 1) - j as usize] += c,
                        FaceBc::Dirichlet => row[2 * (n - 1) - j as usize] -= c,
                    }
                } else {
                    let j = j as usize;
                    if high == FaceBc::Dirichlet && j == n - 1 {
                        continue; // pinned column carries no state
                    }
                    row[j] += c;
                }
            }
        }
        rows
    }

    fn from_rows(n: usize, half: usize, base: Vec<f64>, rows: Vec<Vec<f64>>) -> AxisOp {
        let is_uniform = |i: usize, row: &[f64]| -> bool {
            if i < half || i + half >= n {
                return false;
            }
            row.iter().enumerate().all(|(j, &v)| {
                let expect = if j + half >= i && j <= i + half {
                    base[j + half - i]
                } else {
                    0.0
                };
                v == expect
            })
        };
        let mut uniform_lo = n;
        let mut uniform_hi = 0;
        let mut special = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            if is_uniform(i, row) {
                uniform_lo = uniform_lo.min(i);
                uniform_hi = uniform_hi.max(i + 1);
            }
        }
        if uniform_lo >= uniform_hi {
            uniform_lo = 0;
            uniform_hi = 0;
        }
        let mut taps = Vec::with_capacity(n);
        for (i, row) in rows.iter().enumerate() {
            let row_taps: Vec<(usize, f64)> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(j, &v)| (j, v))
                .collect();
            if !(i >= uniform_lo && i < uniform_hi) {
                special.push((i, row_taps.clone()));
            }
            taps.push(row_taps);
        }
        AxisOp {
            n,
            half,
            base,
            uniform: uniform_lo..uniform_hi,
            special,
            taps,
        }
    }

    /// Forward operator and its exact transpose for one axis.
    fn build(
        n: usize,
        order: usize,
        spacing: f64,
        low: FaceBc,
        high: FaceBc,
    ) -> (AxisOp, AxisOp) {
        let coeffs = stencil_coeffs(order);
        let g = coeffs.len() - 1;
        let inv_h2 = 1.0 / (spacing * spacing);
        let rows = Self::rows(n, &coeffs, inv_h2, low, high);
        let mut transposed = vec![vec![0.0; n]; n];
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                transposed[j][i] = v;
            }
        }
        let base: Vec<f64> = (0..=2 * g)
            .map(|k| coeffs[k.abs_diff(g)] * inv_h2)
            .collect();
        (
            Self::from_rows(n, g, base.clone(), rows),
            Self::from_rows(n, g, base, transposed),
        )
    }
}

/// `out (+)= op applied along `axis` of the volume `u` with dims `dims`.
/// `assign` overwrites instead of accumulating.
fn apply_axis(op: &AxisOp, axis: usize, dims: [usize; 3], u: &[f64], out: &mut [f64], assign: bool) {
    let [n1, n2, n3] = dims;
    debug_assert_eq!(op.n, dims[axis]);
    let g = op.half;
    match axis {
        0 => {
            let plane = n2 * n3;
            if assign {
                out.fill(0.0);
            }
            // every tap is a full-plane axpy
            for i1 in op.uniform.clone() {
                for (k, &c) in op.base.iter().enumerate() {
                    let src = (i1 + k - g) * plane;
                    let dst = i1 * plane;
                    axpy_slice(c, &u[src..src + plane], &mut out[dst..dst + plane]);
                }
            }
            for (i1, taps) in &op.special {
                let dst = i1 * plane;
                for &(j, c) in taps {
                    let src = j * plane;
                    axpy_slice(c, &u[src..src + plane], &mut out[dst..dst + plane]);
                }
            }
        }
        1 => {
            if assign {
                out.fill(0.0);
            }
            for i1 in 0..n1 {
                let s = i1 * n2 * n3;
                for i2 in op.uniform.clone() {
                    let dst = s + i2 * n3;
                    for (k, &c) in op.base.iter().enumerate() {
                        let src = s + (i2 + k - g) * n3;
                        axpy_disjoint(c, u, src, out, dst, n3);
                    }
                }
                for (i2, taps) in &op.special {
                    let dst = s + i2 * n3;
                    for &(j, c) in taps {
                        let src = s + j * n3;
                        axpy_disjoint(c, u, src, out, dst, n3);
                    }
                }
            }
        }
        _ => {
            if assign {
                out.fill(0.0);
            }
            let (lo, hi) = (op.uniform.start, op.uniform.end);
            for row in 0..n1 * n2 {
                let s = row * n3;
                let urow = &u[s..s + n3];
                let orow = &mut out[s..s + n3];
                if lo < hi {
                    for (k, &c) in op.base.iter().enumerate() {
                        let shift = k as isize - g as isize;
                        let src_lo = (lo as isize + shift) as usize;
                        for (o, &v) in orow[lo..hi]
                            .iter_mut()
                            .zip(&urow[src_lo..src_lo + (hi - lo)])
                        {
                            *o += c * v;
                        }
                    }
                }
                for (i3, taps) in &op.special {
                    let mut acc = 0.0;
                    for &(j, c) in taps {
                        acc += c * urow[j];
                    }
                    orow[*i3] += acc;
                }
            }
        }
    }
}

#[inline]
fn axpy_slice(c: f64, src: &[f64], dst: &mut [f64]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += c * v;
    }
}

/// Assign-apply the operator along the contiguous axis of one row.
fn apply_row_x3(op: &AxisOp, u_row: &[f64], out: &mut [f64]) {
    let g = op.half;
    let (lo, hi) = (op.uniform.start, op.uniform.end);
    if lo < hi {
        let width = hi - lo;
        let src0 = lo - g;
        let c0 = op.base[0];
        for (o, &v) in out[lo..hi].iter_mut().zip(&u_row[src0..src0 + width]) {
            *o = c0 * v;
        }
        for (k, &c) in op.base.iter().enumerate().skip(1) {
            let src = lo - g + k;
            for (o, &v) in out[lo..hi].iter_mut().zip(&u_row[src..src + width]) {
                *o += c * v;
            }
        }
    }
    for (i3, taps) in &op.special {
        let mut acc = 0.0;
        for &(j, c) in taps {
            acc += c * u_row[j];
        }
        out[*i3] = acc;
    }
}

/// Per-source injection geometry: the plane-wave phase is affine along the
/// contiguous axis, so the wavelet's active support in each row is a single
/// index interval. Forward and adjoint share this arithmetic exactly, which
/// keeps the adjoint the exact transpose of the forward map.
struct SourceInject {
    /// Phase `p.x/c` at element 0 of each (i1, i2) row.
    row_phase0: Vec<f64>,
    /// Phase increment per i3 node.
    slope: f64,
    onset: f64,
    cut: f64,
    pi_q0_sq: f64,
}

impl SourceInject {
    fn new(domain: &DomainSpec, src: &PlaneWaveSource) -> Self {
        let [n1, n2, _] = domain.dims();
        let mut row_phase0 = Vec::with_capacity(n1 * n2);
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                let p = domain.node_position(i1, i2, 0);
                row_phase0.push(
                    (src.direction[0] * p[0] + src.direction[1] * p[1] + src.direction[2] * p[2])
                        / src.sound_speed,
                );
            }
        }
        SourceInject {
            row_phase0,
            slope: src.direction[2] * domain.spacing / src.sound_speed,
            onset: src.onset_delay(),
            cut: src.effective_support(),
            pi_q0_sq: (std::f64::consts::PI * src.central_frequency).powi(2),
        }
    }

    /// Wavelet value as a function of tau, zero outside the support window.
    #[inline]
    fn wavelet(&self, tau: f64) -> f64 {
        let a = self.pi_q0_sq * tau * tau;
        (1.0 - 2.0 * a) * (-a).exp()
    }

    /// Conservative active-index interval `(lo, hi, t_rel)` of row `row` at
    /// time `t`: `tau(i3) = t_rel - slope * i3`, and every node with
    /// `|tau| < cut` lies inside `[lo, hi)`. The exact per-node test still
    /// applies inside the interval.
    #[inline]
    fn range(&self, row: usize, t: f64, n3: usize) -> (usize, usize, f64) {
        let t_rel = t - self.onset - self.row_phase0[row];
        if self.slope == 0.0 {
            if t_rel.abs() < self.cut {
                return (0, n3, t_rel);
            }
            return (0, 0, t_rel);
        }
        // |t_rel - slope * i| < cut
        let a = (t_rel - self.cut) / self.slope;
        let b = (t_rel + self.cut) / self.slope;
        let (lo_f, hi_f) = if a < b { (a, b) } else { (b, a) };
        let lo = (lo_f.floor() - 1.0).max(0.0) as usize;
        let hi = ((hi_f.ceil() + 2.0).max(0.0) as usize).min(n3);
        (lo.min(n3), hi, t_rel)
    }
}

#[inline]
fn axpy_disjoint(c: f64, u: &[f64], src: usize, out: &mut [f64], dst: usize, len: usize) {
    let s = &u[src..src + len];
    let d = &mut out[dst..dst + len];
    for (o, &v) in d.iter_mut().zip(s) {
        *o += c * v;
    }
}

/// Per-propagation outputs.
#[derive(Debug, Clone, Default)]
pub struct PropagateOutput {
    /// Receiver traces, `n_receivers x n_steps`, time fastest.
    pub trace: Vec<f64>,
    /// Discrete energy after each step (when requested).
    pub energy: Vec<f64>,
    /// Field snapshots as (step, field) pairs (when requested).
    pub snapshots: Vec<(usize, ScalarVolume)>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PropagateOptions {
    pub record_energy: bool,
    pub snapshot_every: Option<usize>,
}

/// Precomputed operators for one (domain, medium, receivers, window) tuple.
#[derive(Debug)]
pub struct WaveSolver {
    pub domain: DomainSpec,
    pub config: SolverConfig,
    dims: [usize; 3],
    n_steps: usize,
    /// dt^2 c^2 per node.
    k2: Vec<f64>,
    /// 1/c^2 per node, for the energy functional.
    inv_c2: Vec<f64>,
    /// Quadrature weights making the folded operator self-adjoint
    /// (1/2 on rigid boundary nodes, tensor product across axes).
    energy_w: Vec<f64>,
    fwd_ops: [AxisOp; 3],
    adj_ops: [AxisOp; 3],
    recv: Vec<[(usize, f64); 8]>,
    sponge: Option<Vec<f64>>,
}

impl WaveSolver {
    pub fn new(
        domain: DomainSpec,
        sound_speed: &ScalarVolume,
        config: SolverConfig,
        receivers: &ReceiverArray,
        probe_window: f64,
        sponge: Option<SpongeConfig>,
    ) -> Result<Self> {
        domain.validate()?;
        if !sound_speed.domain.same_grid(&domain) {
            return Err(Error::validation("sound speed grid differs from domain"));
        }
        if sound_speed.values.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
            return Err(Error::validation("sound speed must be positive and finite"));
        }
        let c_max = sound_speed.max_value();
        config.validate(domain.spacing, c_max)?;
        if !(probe_window > 0.0) {
            return Err(Error::validation("probe window must be > 0"));
        }
        if receivers.is_empty() {
            return Err(Error::validation("receiver array must not be empty"));
        }

        let dims = domain.dims();
        let order = config.spatial_order;
        let h = domain.spacing;
        // x1, x2: rigid both ends; x3: rigid bed, free surface on top.
        let (f0, a0) = AxisOp::build(dims[0], order, h, FaceBc::Neumann, FaceBc::Neumann);
        let (f1, a1) = AxisOp::build(dims[1], order, h, FaceBc::Neumann, FaceBc::Neumann);
        let (f2, a2) = AxisOp::build(dims[2], order, h, FaceBc::Neumann, FaceBc::Dirichlet);

        let dt2 = config.dt * config.dt;
        let k2: Vec<f64> = sound_speed.values.iter().map(|&c| dt2 * c * c).collect();
        let inv_c2: Vec<f64> = sound_speed.values.iter().map(|&c| 1.0 / (c * c)).collect();

        let axis_w = |n: usize, top_dirichlet: bool| -> Vec<f64> {
            let mut w = vec![1.0; n];
            w[0] = 0.5;
            if !top_dirichlet {
                w[n - 1] = 0.5;
            }
            w
        };
        let (w1, w2, w3) = (
            axis_w(dims[0], false),
            axis_w(dims[1], false),
            axis_w(dims[2], true),
        );
        let mut energy_w = Vec::with_capacity(domain.len());
        for a in &w1 {
            for b in &w2 {
                for c in &w3 {
                    energy_w.push(a * b * c);
                }
            }
        }

        let recv = receivers
            .positions
            .iter()
            .map(|&p| trilinear_stencil(&domain, p))
            .collect::<Result<Vec<_>>>()?;

        let sponge = sponge
            .map(|s| -> Result<Vec<f64>> {
                if !(s.width > 0.0) || !(s.strength >= 0.0) {
                    return Err(Error::validation("sponge width must be > 0, strength >= 0"));
                }
                let mut damp = vec![1.0; domain.len()];
                let [n1, n2, n3] = dims;
                for i1 in 0..n1 {
                    for i2 in 0..n2 {
                        let x2 = domain.origin[1] + h * i2 as f64;
                        let edge = (x2 - domain.origin[1])
                            .min(domain.origin[1] + domain.extent[1] - x2);
                        if edge < s.width {
                            let r = 1.0 - edge / s.width;
                            let sigma = s.strength * r * r;
                            let factor = (-sigma * config.dt).exp();
                            for i3 in 0..n3 {
                                damp[domain.offset(i1, i2, i3)] = factor;
                            }
                        }
                    }
                }
                Ok(damp)
            })
            .transpose()?;

        let n_steps = (probe_window / config.dt).ceil() as usize;
        if n_steps == 0 {
            return Err(Error::validation("probe window shorter than one time step"));
        }

        Ok(WaveSolver {
            domain,
            config,
            dims,
            n_steps,
            k2,
            inv_c2,
            energy_w,
            fwd_ops: [f0, f1, f2],
            adj_ops: [a0, a1, a2],
            recv,
            sponge,
        })
    }

    /// Uniform-medium convenience constructor.
    pub fn homogeneous(
        domain: DomainSpec,
        sound_speed: f64,
        config: SolverConfig,
        receivers: &ReceiverArray,
        probe_window: f64,
    ) -> Result<Self> {
        let c = ScalarVolume::from_fn(domain, |_| sound_speed);
        Self::new(domain, &c, config, receivers, probe_window, None)
    }

    /// Solver time steps per probe.
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Recorded trace samples per probe (`ceil(n_steps / record_every)`).
    pub fn n_recorded(&self) -> usize {
        self.n_steps.div_ceil(self.config.record_every)
    }

    /// Seconds between recorded samples.
    pub fn sample_interval(&self) -> f64 {
        self.config.dt * self.config.record_every as f64
    }

    pub fn n_receivers(&self) -> usize {
        self.recv.len()
    }

    fn laplacian(&self, ops: &[AxisOp; 3], u: &[f64], out: &mut [f64]) {
        apply_axis(&ops[0], 0, self.dims, u, out, true);
        apply_axis(&ops[1], 1, self.dims, u, out, false);
        apply_axis(&ops[2], 2, self.dims, u, out, false);
    }

    /// One fused leapfrog step:
    /// `u_next = 2 u_cur - u_prev + k2 * (L u_cur + lambda(., t) f)`,
    /// with the free-surface plane pinned to zero. `f` may be `None` (the
    /// adjoint recursion has no volumetric source). Row-fused so each output
    /// row is written once.
    #[allow(clippy::too_many_arguments)]
    fn fused_step(
        &self,
        ops: &[AxisOp; 3],
        u_prev: &[f64],
        u_cur: &[f64],
        u_next: &mut [f64],
        acc: &mut [f64],
        inject: Option<(&SourceInject, f64, &[f64])>,
    ) {
        let [n1, n2, n3] = self.dims;
        for i1 in 0..n1 {
            let taps1 = &ops[0].taps[i1];
            for i2 in 0..n2 {
                let row = i1 * n2 + i2;
                let s = row * n3;
                apply_row_x3(&ops[2], &u_cur[s..s + n3], acc);
                for &(j1, c) in taps1 {
                    let src = (j1 * n2 + i2) * n3;
                    axpy_slice(c, &u_cur[src..src + n3], acc);
                }
                for &(j2, c) in &ops[1].taps[i2] {
                    let src = (i1 * n2 + j2) * n3;
                    axpy_slice(c, &u_cur[src..src + n3], acc);
                }
                {
                    let un = &mut u_next[s..s + n3];
                    let uc = &u_cur[s..s + n3];
                    let up = &u_prev[s..s + n3];
                    let kr = &self.k2[s..s + n3];
                    for j in 0..n3 {
                        un[j] = 2.0 * uc[j] - up[j] + kr[j] * acc[j];
                    }
                    if let Some((inj, t, f)) = inject {
                        let (lo, hi, t_rel) = inj.range(row, t, n3);
                        let fr = &f[s..s + n3];
                        for j in lo..hi {
                            let tau = t_rel - inj.slope * j as f64;
                            if tau.abs() < inj.cut && fr[j] != 0.0 {
                                un[j] += kr[j] * fr[j] * inj.wavelet(tau);
                            }
                        }
                    }
                    un[n3 - 1] = 0.0; // free surface
                }
            }
        }
    }

    fn zero_surface_plane(&self, u: &mut [f64]) {
        let [n1, n2, n3] = self.dims;
        let top = n3 - 1;
        for i1 in 0..n1 {
            let s = i1 * n2 * n3;
            for i2 in 0..n2 {
                u[s + i2 * n3 + top] = 0.0;
            }
        }
    }

    /// One-source forward solve. The trace row holds the field sampled at
    /// each receiver after every step.
    pub fn propagate(
        &self,
        f: &ScalarVolume,
        src: &PlaneWaveSource,
        opts: &PropagateOptions,
    ) -> Result<PropagateOutput> {
        if !f.domain.same_grid(&self.domain) {
            return Err(Error::validation("source volume grid differs from solver"));
        }
        let n = self.domain.len();
        let dt = self.config.dt;
        let n_t = self.n_steps;
        let every = self.config.record_every;
        let n_rec = self.n_recorded();
        let inject = SourceInject::new(&self.domain, src);

        let mut u_prev = vec![0.0; n];
        let mut u_cur = vec![0.0; n];
        let mut u_next = vec![0.0; n];
        let mut acc = vec![0.0; self.dims[2]];
        let mut lap = vec![0.0; n];
        let mut out = PropagateOutput {
            trace: vec![0.0; self.recv.len() * n_rec],
            ..Default::default()
        };

        for step in 0..n_t {
            let t = step as f64 * dt;
            self.fused_step(
                &self.fwd_ops,
                &u_prev,
                &u_cur,
                &mut u_next,
                &mut acc,
                Some((&inject, t, &f.values)),
            );
            if let Some(damp) = &self.sponge {
                for i in 0..n {
                    u_next[i] *= damp[i];
                }
            }
            if step % every == 0 {
                let col = step / every;
                for (s, taps) in self.recv.iter().enumerate() {
                    let mut acc = 0.0;
                    for &(idx, w) in taps {
                        acc += w * u_next[idx];
                    }
                    out.trace[s * n_rec + col] = acc;
                }
            }
            if step % FINITE_CHECK_STRIDE == FINITE_CHECK_STRIDE - 1 || step == n_t - 1 {
                if let Some(bad) = u_next.iter().find(|v| !v.is_finite()) {
                    return Err(Error::numeric(
                        format!("propagate step {step}"),
                        format!("field value {bad} is not finite"),
                    ));
                }
            }
            std::mem::swap(&mut u_prev, &mut u_cur);
            std::mem::swap(&mut u_cur, &mut u_next);
            // now u_cur = u^{step+1}, u_prev = u^{step}
            if opts.record_energy {
                out.energy.push(self.discrete_energy_raw(&u_prev, &u_cur, &mut lap));
            }
            if let Some(every) = opts.snapshot_every {
                if step % every == 0 {
                    out.snapshots.push((
                        step,
                        ScalarVolume::from_values(self.domain, u_cur.clone())?,
                    ));
                }
            }
        }
        Ok(out)
    }

    /// Forward map over all sources; source solves run in parallel and each
    /// writes its own trace block, so the result is schedule-independent.
    pub fn forward_all(&self, f: &ScalarVolume, sources: &SourceSet) -> Result<TraceSet> {
        let n_rec = self.n_recorded();
        let n_recv = self.recv.len();
        let mut traces = TraceSet::zeros(sources.len(), n_recv, n_rec, self.sample_interval());
        let opts = PropagateOptions::default();
        let blocks: Vec<(usize, &mut [f64])> = {
            let block = n_recv * n_rec;
            traces
                .samples
                .chunks_mut(block)
                .enumerate()
                .collect()
        };
        blocks
            .into_par_iter()
            .map(|(m, block)| {
                let run = self
                    .propagate(f, &sources.sources[m], &opts)
                    .map_err(|e| match e {
                        Error::Numeric { context, detail } => Error::Numeric {
                            context: format!("source {m}: {context}"),
                            detail,
                        },
                        other => other,
                    })?;
                block.copy_from_slice(&run.trace);
                Ok(())
            })
            .collect::<Result<Vec<()>>>()?;
        Ok(traces)
    }

    /// Physical adjoint of `forward_all`: maps trace-space residuals to a
    /// volume so that `sample_interval * <A f, w> = h^3 * <f, adjoint(w)>`
    /// holds to rounding. One backward-in-time solve per source with
    /// residuals injected at the receivers; the per-source volumes are
    /// summed in source order.
    pub fn adjoint(&self, sources: &SourceSet, residual: &TraceSet) -> Result<ScalarVolume> {
        if residual.n_sources != sources.len()
            || residual.n_receivers != self.recv.len()
            || residual.n_steps != self.n_recorded()
        {
            return Err(Error::validation(format!(
                "residual dims {}x{}x{} do not match problem {}x{}x{}",
                residual.n_sources,
                residual.n_receivers,
                residual.n_steps,
                sources.len(),
                self.recv.len(),
                self.n_recorded()
            )));
        }
        let per_source: Vec<Vec<f64>> = (0..sources.len())
            .into_par_iter()
            .map(|m| self.adjoint_one(&sources.sources[m], residual.source_block(m)))
            .collect::<Result<Vec<_>>>()?;
        let mut g = vec![0.0; self.domain.len()];
        // sample_interval/h^3 converts the plain transpose into the
        // physical adjoint.
        let scale = self.sample_interval() / self.domain.spacing.powi(3);
        for gm in &per_source {
            for (acc, &v) in g.iter_mut().zip(gm) {
                *acc += v;
            }
        }
        for v in g.iter_mut() {
            *v *= scale;
        }
        ScalarVolume::from_values(self.domain, g)
    }

    /// Euclidean transpose of the one-source forward map applied to one
    /// trace block (receiver-major, time fastest).
    fn adjoint_one(&self, src: &PlaneWaveSource, w: &[f64]) -> Result<Vec<f64>> {
        let n = self.domain.len();
        let [n1, n2, n3] = self.dims;
        let n_t = self.n_steps;
        let every = self.config.record_every;
        let n_rec = self.n_recorded();
        let inject = SourceInject::new(&self.domain, src);
        let dt = self.config.dt;

        // The adjoint recursion is `q_i = Bt (P q_{i+1}) - P q_{i+2} + Rt w_i`
        // with `Bt = 2I + Lt K` and `P` the projector-damping diagonal of the
        // forward step; only `P q` is ever needed, so that is what the qp_*
        // buffers hold.
        let mut qp_next = vec![0.0; n]; // P q_{i+1}
        let mut qp_after = vec![0.0; n]; // P q_{i+2}
        let mut q_new = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        let mut acc = vec![0.0; n3];
        let mut g = vec![0.0; n];

        for i in (0..n_t).rev() {
            // q_new = 2 qp_next - qp_after + Lt (k2 * qp_next)
            for j in 0..n {
                tmp[j] = self.k2[j] * qp_next[j];
            }
            for i1 in 0..n1 {
                let taps1 = &self.adj_ops[0].taps[i1];
                for i2 in 0..n2 {
                    let s = (i1 * n2 + i2) * n3;
                    apply_row_x3(&self.adj_ops[2], &tmp[s..s + n3], &mut acc);
                    for &(j1, c) in taps1 {
                        let srd = (j1 * n2 + i2) * n3;
                        axpy_slice(c, &tmp[srd..srd + n3], &mut acc);
                    }
                    for &(j2, c) in &self.adj_ops[1].taps[i2] {
                        let srd = (i1 * n2 + j2) * n3;
                        axpy_slice(c, &tmp[srd..srd + n3], &mut acc);
                    }
                    let qn = &mut q_new[s..s + n3];
                    let qc = &qp_next[s..s + n3];
                    let qa = &qp_after[s..s + n3];
                    for j in 0..n3 {
                        qn[j] = 2.0 * qc[j] - qa[j] + acc[j];
                    }
                }
            }
            if i % every == 0 {
                let col = i / every;
                for (s, taps) in self.recv.iter().enumerate() {
                    let ws = w[s * n_rec + col];
                    if ws != 0.0 {
                        for &(idx, wt) in taps {
                            q_new[idx] += wt * ws;
                        }
                    }
                }
            }
            self.zero_surface_plane(&mut q_new);
            if let Some(damp) = &self.sponge {
                for j in 0..n {
                    q_new[j] *= damp[j];
                }
            }
            // q_new now holds P q_i; accumulate lambda(., t_i) * k2 * (P q_i)
            let t = i as f64 * dt;
            for row in 0..n1 * n2 {
                let (lo, hi, t_rel) = inject.range(row, t, n3);
                if lo >= hi {
                    continue;
                }
                let s = row * n3;
                let gr = &mut g[s..s + n3];
                let qr = &q_new[s..s + n3];
                let kr = &self.k2[s..s + n3];
                for j in lo..hi {
                    let tau = t_rel - inject.slope * j as f64;
                    if tau.abs() < inject.cut {
                        gr[j] += inject.wavelet(tau) * kr[j] * qr[j];
                    }
                }
            }
            std::mem::swap(&mut qp_after, &mut qp_next);
            std::mem::swap(&mut qp_next, &mut q_new);
            if i % FINITE_CHECK_STRIDE == 0 {
                if let Some(bad) = qp_next.iter().find(|v| !v.is_finite()) {
                    return Err(Error::numeric(
                        format!("adjoint step {i}"),
                        format!("field value {bad} is not finite"),
                    ));
                }
            }
        }
        Ok(g)
    }

    /// Conserved discrete energy of the unforced scheme, evaluated from two
    /// consecutive field levels:
    ///
    /// `E = (h^3/2) [ sum W/c^2 ((u1-u0)/dt)^2 - sum W u0 (L u1) ]`
    ///
    /// with W the boundary-halved quadrature weights. Exactly conserved in
    /// exact arithmetic once the source has gone quiet.
    pub fn discrete_energy(&self, u_prev: &ScalarVolume, u_cur: &ScalarVolume) -> f64 {
        let mut lap = vec![0.0; self.domain.len()];
        self.discrete_energy_raw(&u_prev.values, &u_cur.values, &mut lap)
    }

    fn discrete_energy_raw(&self, u_prev: &[f64], u_cur: &[f64], lap: &mut [f64]) -> f64 {
        let dt = self.config.dt;
        self.laplacian(&self.fwd_ops, u_cur, lap);
        let mut kinetic = 0.0;
        let mut potential = 0.0;
        for j in 0..u_prev.len() {
            let v = (u_cur[j] - u_prev[j]) / dt;
            kinetic += self.energy_w[j] * self.inv_c2[j] * v * v;
            potential -= self.energy_w[j] * u_prev[j] * lap[j];
        }
        0.5 * self.domain.spacing.powi(3) * (kinetic + potential)
    }
}
