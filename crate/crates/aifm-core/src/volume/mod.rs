//! Regular-grid domain description and scalar/vector field containers.
//!
//! Grid convention: a domain of extent `E` with spacing `h` carries
//! `E/h + 1` nodes per axis (both faces included). Values are stored
//! row-major with the third axis fastest: the node `(i1, i2, i3)` lives at
//! offset `i3 + n3 * (i2 + n2 * i1)`. That ordering is part of the on-disk
//! contract and must not change.

mod io;

pub use io::{
    export_receiver_csv, export_trace_csv, export_vtk, read_trace_set, read_vector_volume,
    read_volume, write_trace_set, write_vector_volume, write_volume,
};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Relative tolerance for "extent is an integer multiple of spacing".
const EXTENT_MULTIPLE_RTOL: f64 = 1e-9;

/// Axis-aligned box domain with a uniform grid.
///
/// Axis roles: `x1` channel width, `x2` along-flow length, `x3` depth
/// (the `x3 = extent[2]` plane is the free surface).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Physical extent per axis, metres.
    pub extent: [f64; 3],
    /// Uniform grid spacing, metres.
    pub spacing: f64,
    /// Physical coordinate of node (0,0,0), metres.
    pub origin: [f64; 3],
}

impl DomainSpec {
    pub fn new(extent: [f64; 3], spacing: f64, origin: [f64; 3]) -> Result<Self> {
        let spec = DomainSpec {
            extent,
            spacing,
            origin,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Unit-origin convenience constructor.
    pub fn with_extent(extent: [f64; 3], spacing: f64) -> Result<Self> {
        Self::new(extent, spacing, [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0) {
            return Err(Error::validation(format!(
                "spacing must be > 0, got {}",
                self.spacing
            )));
        }
        for (axis, &e) in self.extent.iter().enumerate() {
            if !(e > 0.0) {
                return Err(Error::validation(format!(
                    "extent[{axis}] must be > 0, got {e}"
                )));
            }
            let ratio = e / self.spacing;
            if (ratio - ratio.round()).abs() > EXTENT_MULTIPLE_RTOL * ratio.max(1.0) {
                return Err(Error::validation(format!(
                    "extent[{axis}] = {e} is not an integer multiple of spacing {} \
                     (ratio {ratio})",
                    self.spacing
                )));
            }
            if (ratio.round() as usize) + 1 < 5 {
                return Err(Error::validation(format!(
                    "axis {axis} has {} grid points, need at least 5",
                    ratio.round() as usize + 1
                )));
            }
        }
        Ok(())
    }

    /// Node count per axis (`extent/spacing + 1`).
    pub fn dims(&self) -> [usize; 3] {
        let n = |e: f64| (e / self.spacing).round() as usize + 1;
        [n(self.extent[0]), n(self.extent[1]), n(self.extent[2])]
    }

    pub fn len(&self) -> usize {
        let [n1, n2, n3] = self.dims();
        n1 * n2 * n3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Physical coordinates of node `(i1, i2, i3)`.
    pub fn node_position(&self, i1: usize, i2: usize, i3: usize) -> [f64; 3] {
        [
            self.origin[0] + self.spacing * i1 as f64,
            self.origin[1] + self.spacing * i2 as f64,
            self.origin[2] + self.spacing * i3 as f64,
        ]
    }

    pub fn max_corner(&self) -> [f64; 3] {
        [
            self.origin[0] + self.extent[0],
            self.origin[1] + self.extent[1],
            self.origin[2] + self.extent[2],
        ]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let max = self.max_corner();
        (0..3).all(|a| p[a] >= self.origin[a] && p[a] <= max[a])
    }

    /// Flat offset of node `(i1, i2, i3)`; the documented index ordering.
    #[inline]
    pub fn offset(&self, i1: usize, i2: usize, i3: usize) -> usize {
        let [_, n2, n3] = self.dims();
        i3 + n3 * (i2 + n2 * i1)
    }

    /// Grids are considered identical when dims, spacing and origin agree
    /// to floating-point equality; this is the compatibility check used
    /// before any two-volume operation.
    pub fn same_grid(&self, other: &DomainSpec) -> bool {
        self.dims() == other.dims() && self.spacing == other.spacing && self.origin == other.origin
    }
}

/// Scalar field sampled at every grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    pub domain: DomainSpec,
    pub values: Vec<f64>,
}

impl ScalarVolume {
    pub fn zeros(domain: DomainSpec) -> Self {
        ScalarVolume {
            domain,
            values: vec![0.0; domain.len()],
        }
    }

    pub fn from_values(domain: DomainSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != domain.len() {
            return Err(Error::validation(format!(
                "value count {} does not match grid size {}",
                values.len(),
                domain.len()
            )));
        }
        Ok(ScalarVolume { domain, values })
    }

    /// Fill from a function of physical position.
    pub fn from_fn(domain: DomainSpec, mut f: impl FnMut([f64; 3]) -> f64) -> Self {
        let [n1, n2, n3] = domain.dims();
        let mut values = Vec::with_capacity(domain.len());
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                for i3 in 0..n3 {
                    values.push(f(domain.node_position(i1, i2, i3)));
                }
            }
        }
        ScalarVolume { domain, values }
    }

    #[inline]
    pub fn get(&self, i1: usize, i2: usize, i3: usize) -> f64 {
        self.values[self.domain.offset(i1, i2, i3)]
    }

    #[inline]
    pub fn set(&mut self, i1: usize, i2: usize, i3: usize, v: f64) {
        let off = self.domain.offset(i1, i2, i3);
        self.values[off] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Centre of mass of the non-negative part, in physical coordinates.
    /// Returns `None` when the non-negative mass is zero.
    pub fn center_of_mass(&self) -> Option<[f64; 3]> {
        let [n1, n2, n3] = self.domain.dims();
        let mut mass = 0.0;
        let mut moment = [0.0; 3];
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                for i3 in 0..n3 {
                    let w = self.get(i1, i2, i3).max(0.0);
                    if w > 0.0 {
                        let p = self.domain.node_position(i1, i2, i3);
                        mass += w;
                        for a in 0..3 {
                            moment[a] += w * p[a];
                        }
                    }
                }
            }
        }
        if mass > 0.0 {
            Some([moment[0] / mass, moment[1] / mass, moment[2] / mass])
        } else {
            None
        }
    }
}

/// Three-component vector field; all components share one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorVolume {
    pub domain: DomainSpec,
    pub components: [ScalarVolume; 3],
}

impl VectorVolume {
    pub fn zeros(domain: DomainSpec) -> Self {
        VectorVolume {
            domain,
            components: [
                ScalarVolume::zeros(domain),
                ScalarVolume::zeros(domain),
                ScalarVolume::zeros(domain),
            ],
        }
    }

    pub fn from_fn(domain: DomainSpec, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Self {
        let mut v = VectorVolume::zeros(domain);
        let [n1, n2, n3] = domain.dims();
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                for i3 in 0..n3 {
                    let val = f(domain.node_position(i1, i2, i3));
                    let off = domain.offset(i1, i2, i3);
                    for a in 0..3 {
                        v.components[a].values[off] = val[a];
                    }
                }
            }
        }
        v
    }

    pub fn at_offset(&self, off: usize) -> [f64; 3] {
        [
            self.components[0].values[off],
            self.components[1].values[off],
            self.components[2].values[off],
        ]
    }

    /// Trilinear sample of all three components.
    pub fn sample(&self, point: [f64; 3]) -> Result<[f64; 3]> {
        Ok([
            trilinear_sample(&self.components[0], point)?,
            trilinear_sample(&self.components[1], point)?,
            trilinear_sample(&self.components[2], point)?,
        ])
    }
}

/// Probe timing: `count` acoustic snapshots `interval` seconds apart, each
/// probed over a window short enough that the particle field is frozen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSchedule {
    pub count: usize,
    /// Seconds between consecutive snapshots.
    pub interval: f64,
    /// Duration of one acoustic probe, seconds.
    pub probe_window: f64,
}

impl SnapshotSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.count < 2 {
            return Err(Error::validation(format!(
                "snapshot count must be >= 2, got {}",
                self.count
            )));
        }
        if !(self.interval > 0.0) {
            return Err(Error::validation("snapshot interval must be > 0"));
        }
        if !(self.probe_window > 0.0) {
            return Err(Error::validation("probe window must be > 0"));
        }
        if self.probe_window > self.interval / 10.0 {
            return Err(Error::validation(format!(
                "probe window {} must be <= interval/10 = {} so the particle \
                 field is effectively frozen during each probe",
                self.probe_window,
                self.interval / 10.0
            )));
        }
        Ok(())
    }
}

/// Trilinear interpolation of `vol` at a physical point.
///
/// Exact at grid nodes and for fields linear in the coordinates.
pub fn trilinear_sample(vol: &ScalarVolume, point: [f64; 3]) -> Result<f64> {
    let d = &vol.domain;
    if !d.contains(point) {
        return Err(Error::OutOfDomain {
            point,
            min: d.origin,
            max: d.max_corner(),
        });
    }
    let [n1, n2, n3] = d.dims();
    let dims = [n1, n2, n3];
    let mut base = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let t = (point[a] - d.origin[a]) / d.spacing;
        // Clamp so a point exactly on the far face uses the last cell.
        let mut i = t.floor() as usize;
        if i + 1 >= dims[a] {
            i = dims[a] - 2;
        }
        base[a] = i;
        frac[a] = t - i as f64;
    }
    let mut acc = 0.0;
    for (c1, w1) in [(0, 1.0 - frac[0]), (1, frac[0])] {
        for (c2, w2) in [(0, 1.0 - frac[1]), (1, frac[1])] {
            for (c3, w3) in [(0, 1.0 - frac[2]), (1, frac[2])] {
                acc += w1
                    * w2
                    * w3
                    * vol.get(base[0] + c1, base[1] + c2, base[2] + c3);
            }
        }
    }
    Ok(acc)
}

/// Node indices and weights of the trilinear stencil at `point`.
///
/// `sample` is `sum(w_i * values[idx_i])`; the transpose (scatter) of the
/// same weights is what receiver injection in the adjoint solve uses.
pub fn trilinear_stencil(domain: &DomainSpec, point: [f64; 3]) -> Result<[(usize, f64); 8]> {
    if !domain.contains(point) {
        return Err(Error::OutOfDomain {
            point,
            min: domain.origin,
            max: domain.max_corner(),
        });
    }
    let dims = domain.dims();
    let mut base = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let t = (point[a] - domain.origin[a]) / domain.spacing;
        let mut i = t.floor() as usize;
        if i + 1 >= dims[a] {
            i = dims[a] - 2;
        }
        base[a] = i;
        frac[a] = t - i as f64;
    }
    let mut out = [(0usize, 0f64); 8];
    let mut k = 0;
    for (c1, w1) in [(0, 1.0 - frac[0]), (1, frac[0])] {
        for (c2, w2) in [(0, 1.0 - frac[1]), (1, frac[1])] {
            for (c3, w3) in [(0, 1.0 - frac[2]), (1, frac[2])] {
                out[k] = (
                    domain.offset(base[0] + c1, base[1] + c2, base[2] + c3),
                    w1 * w2 * w3,
                );
                k += 1;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_domain(n: usize) -> DomainSpec {
        DomainSpec::with_extent([1.0; 3], 1.0 / (n - 1) as f64).unwrap()
    }

    #[test]
    fn dims_from_extent_and_spacing() {
        let d = DomainSpec::with_extent([1.0, 2.0, 0.5], 0.1).unwrap();
        assert_eq!(d.dims(), [11, 21, 6]);
    }

    #[test]
    fn extent_must_divide_evenly() {
        assert!(DomainSpec::with_extent([1.0, 1.0, 1.0], 0.3).is_err());
    }

    #[test]
    fn too_few_nodes_rejected() {
        assert!(DomainSpec::with_extent([1.0, 1.0, 1.0], 0.5).is_err());
    }

    #[test]
    fn offset_ordering_matches_contract() {
        let d = unit_domain(5);
        // i3 fastest: offset = i3 + n3*(i2 + n2*i1)
        assert_eq!(d.offset(0, 0, 1), 1);
        assert_eq!(d.offset(0, 1, 0), 5);
        assert_eq!(d.offset(1, 0, 0), 25);
        assert_eq!(d.offset(2, 3, 4), 4 + 5 * (3 + 5 * 2));
    }

    #[test]
    fn trilinear_constant_field() {
        let d = unit_domain(7);
        let v = ScalarVolume::from_fn(d, |_| 4.2);
        let s = trilinear_sample(&v, [0.31, 0.77, 0.05]).unwrap();
        assert!((s - 4.2).abs() < 1e-12);
    }

    #[test]
    fn trilinear_linear_field_exact() {
        let d = unit_domain(9);
        let v = ScalarVolume::from_fn(d, |p| p[1]);
        let s = trilinear_sample(&v, [0.5, 0.37, 0.9]).unwrap();
        assert!((s - 0.37).abs() < 1e-12);
    }

    #[test]
    fn trilinear_exact_at_grid_nodes() {
        // Oracle: direct index lookup.
        let d = unit_domain(5);
        let mut v = ScalarVolume::zeros(d);
        let mut seed = 1234u64;
        for val in v.values.iter_mut() {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *val = (seed >> 11) as f64 / (1u64 << 53) as f64;
        }
        for (i1, i2, i3) in [(0, 0, 0), (2, 3, 1), (4, 4, 4), (1, 0, 3)] {
            let p = d.node_position(i1, i2, i3);
            let s = trilinear_sample(&v, p).unwrap();
            assert_eq!(s, v.get(i1, i2, i3), "node ({i1},{i2},{i3})");
        }
    }

    #[test]
    fn trilinear_out_of_domain_errors() {
        let d = unit_domain(5);
        let v = ScalarVolume::zeros(d);
        assert!(matches!(
            trilinear_sample(&v, [1.5, 0.5, 0.5]),
            Err(Error::OutOfDomain { .. })
        ));
    }

    #[test]
    fn trilinear_is_linear_in_the_volume() {
        let d = unit_domain(6);
        let a = ScalarVolume::from_fn(d, |p| (7.0 * p[0]).sin() + p[2]);
        let b = ScalarVolume::from_fn(d, |p| (3.0 * p[1]).cos());
        let (alpha, beta) = (0.7, -2.3);
        let mut combo = ScalarVolume::zeros(d);
        for i in 0..combo.values.len() {
            combo.values[i] = alpha * a.values[i] + beta * b.values[i];
        }
        let p = [0.21, 0.68, 0.94];
        let lhs = trilinear_sample(&combo, p).unwrap();
        let rhs = alpha * trilinear_sample(&a, p).unwrap() + beta * trilinear_sample(&b, p).unwrap();
        assert!(crate::util::rel_diff(lhs, rhs) < 1e-12);
    }

    #[test]
    fn schedule_probe_window_bound() {
        let ok = SnapshotSchedule {
            count: 5,
            interval: 1.0,
            probe_window: 0.1,
        };
        assert!(ok.validate().is_ok());
        let bad = SnapshotSchedule {
            count: 5,
            interval: 1.0,
            probe_window: 0.11,
        };
        assert!(bad.validate().is_err());
    }
}
