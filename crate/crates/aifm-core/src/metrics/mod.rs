//! The four relative errors between reconstructed and true velocity
//! fields, with explicit region masks.
//!
//! RE1/RE2 are relative L2 errors over the whole domain / the particle
//! support; RE3/RE4 compare the mean velocity vector projected on the flow
//! direction over the same two regions. The projected errors are undefined
//! when the true mean velocity is negligible (symmetric flows average to
//! zero), and that undefined state is a reported value, not an error.

use crate::error::{Error, Result};
use crate::util::stable_sum;
use crate::volume::{DomainSpec, ScalarVolume, VectorVolume};
use serde::{Deserialize, Serialize};

/// Below this true mean speed (m/s) the flow direction, and with it
/// RE3/RE4, is undefined.
pub const DIRECTION_EPSILON: f64 = 1e-9;

/// How a mask was produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MaskProvenance {
    WholeDomain,
    /// Voxels with `f_true > threshold * max(f_true)`.
    ParticleSupport { threshold: f64 },
}

/// Boolean voxel selection with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub domain: DomainSpec,
    pub selected: Vec<bool>,
    pub provenance: MaskProvenance,
}

impl RegionMask {
    pub fn whole_domain(domain: DomainSpec) -> Self {
        RegionMask {
            domain,
            selected: vec![true; domain.len()],
            provenance: MaskProvenance::WholeDomain,
        }
    }

    /// Threshold the particle truth at `threshold * max`.
    pub fn particle_support(f_true: &ScalarVolume, threshold: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&threshold) {
            return Err(Error::validation(format!(
                "support threshold {threshold} must lie in [0, 1)"
            )));
        }
        let max = f_true.max_value();
        if !(max > 0.0) {
            return Err(Error::validation(
                "particle support mask needs a non-empty truth volume",
            ));
        }
        let cut = threshold * max;
        let selected: Vec<bool> = f_true.values.iter().map(|&v| v > cut).collect();
        if !selected.iter().any(|&s| s) {
            return Err(Error::validation("particle support mask is empty"));
        }
        Ok(RegionMask {
            domain: f_true.domain,
            selected,
            provenance: MaskProvenance::ParticleSupport { threshold },
        })
    }

    /// Clear the outermost `shell` voxels on every face (the flow
    /// estimate is border-biased there).
    pub fn exclude_border(&mut self, shell: usize) {
        let [n1, n2, n3] = self.domain.dims();
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                for i3 in 0..n3 {
                    let edge = i1 < shell
                        || i2 < shell
                        || i3 < shell
                        || i1 + shell >= n1
                        || i2 + shell >= n2
                        || i3 + shell >= n3;
                    if edge {
                        self.selected[self.domain.offset(i1, i2, i3)] = false;
                    }
                }
            }
        }
    }

    /// Clear `depth` voxels on one face only.
    pub fn exclude_face(&mut self, axis: usize, at_max_face: bool, depth: usize) {
        let dims = self.domain.dims();
        let n_axis = dims[axis];
        for i1 in 0..dims[0] {
            for i2 in 0..dims[1] {
                for i3 in 0..dims[2] {
                    let idx = [i1, i2, i3][axis];
                    let hit = if at_max_face {
                        idx + depth >= n_axis
                    } else {
                        idx < depth
                    };
                    if hit {
                        self.selected[self.domain.offset(i1, i2, i3)] = false;
                    }
                }
            }
        }
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }
}

/// `||v_rec - v_true}||_L2(mask) / ||v_true||_L2(mask)`, voxel-volume
/// weighted. `None` when the truth has zero norm on the mask.
pub fn relative_l2(
    v_rec: &VectorVolume,
    v_true: &VectorVolume,
    mask: &RegionMask,
) -> Result<Option<f64>> {
    check_grids(v_rec, v_true, mask)?;
    let n = mask.selected.len();
    let mut num = Vec::with_capacity(n);
    let mut den = Vec::with_capacity(n);
    for i in 0..n {
        if !mask.selected[i] {
            continue;
        }
        let mut d2 = 0.0;
        let mut t2 = 0.0;
        for a in 0..3 {
            let r = v_rec.components[a].values[i];
            let t = v_true.components[a].values[i];
            d2 += (r - t) * (r - t);
            t2 += t * t;
        }
        num.push(d2);
        den.push(t2);
    }
    let h3 = mask.domain.spacing.powi(3);
    let denom = h3 * stable_sum(&den);
    if !(denom > 0.0) {
        return Ok(None);
    }
    Ok(Some((h3 * stable_sum(&num) / denom).sqrt()))
}

/// Mean of a vector field over a mask.
pub fn mean_velocity(v: &VectorVolume, mask: &RegionMask) -> [f64; 3] {
    let mut acc = [Vec::new(), Vec::new(), Vec::new()];
    for i in 0..mask.selected.len() {
        if mask.selected[i] {
            for a in 0..3 {
                acc[a].push(v.components[a].values[i]);
            }
        }
    }
    let count = acc[0].len().max(1) as f64;
    [
        stable_sum(&acc[0]) / count,
        stable_sum(&acc[1]) / count,
        stable_sum(&acc[2]) / count,
    ]
}

/// Relative error of the mean velocity projected on the true flow
/// direction: with `dhat = mean(v_true)/|mean(v_true)|`,
/// `|mean(v_rec).dhat - mean(v_true).dhat| / |mean(v_true).dhat|`.
/// `None` when `|mean(v_true)| < DIRECTION_EPSILON`.
pub fn directional_error(
    v_rec: &VectorVolume,
    v_true: &VectorVolume,
    mask: &RegionMask,
) -> Result<Option<f64>> {
    check_grids(v_rec, v_true, mask)?;
    let mt = mean_velocity(v_true, mask);
    let mag = (mt[0] * mt[0] + mt[1] * mt[1] + mt[2] * mt[2]).sqrt();
    if mag < DIRECTION_EPSILON {
        return Ok(None);
    }
    let dhat = [mt[0] / mag, mt[1] / mag, mt[2] / mag];
    projected_mean_error(v_rec, v_true, mask, dhat)
}

/// Projected-mean error against an externally supplied flow direction.
/// `None` when the truth's projected mean is negligible.
pub fn projected_mean_error(
    v_rec: &VectorVolume,
    v_true: &VectorVolume,
    mask: &RegionMask,
    dhat: [f64; 3],
) -> Result<Option<f64>> {
    check_grids(v_rec, v_true, mask)?;
    let mt = mean_velocity(v_true, mask);
    let mr = mean_velocity(v_rec, mask);
    let proj_true: f64 = (0..3).map(|a| mt[a] * dhat[a]).sum();
    let proj_rec: f64 = (0..3).map(|a| mr[a] * dhat[a]).sum();
    if proj_true.abs() < DIRECTION_EPSILON {
        return Ok(None);
    }
    Ok(Some((proj_rec - proj_true).abs() / proj_true.abs()))
}

fn check_grids(v_rec: &VectorVolume, v_true: &VectorVolume, mask: &RegionMask) -> Result<()> {
    if !v_rec.domain.same_grid(&v_true.domain) || !v_rec.domain.same_grid(&mask.domain) {
        return Err(Error::validation(
            "velocity fields and mask must share one grid",
        ));
    }
    Ok(())
}

/// Extra exclusion depth on the inflow face: where tracers stream into the
/// measurement box, frame pairs are incomplete (a sphere materialising
/// through the face has a visible centroid that moves faster than the
/// fluid), so the transit band carries no valid flow data. The depth is
/// one frame of mean travel plus the largest particle radius, in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitExclusion {
    pub axis: usize,
    /// Inflow at the max face (mean flow pointing in -axis direction).
    pub at_max_face: bool,
    /// Voxels excluded beyond the border shell.
    pub depth: usize,
}

impl TransitExclusion {
    /// Derive the exclusion from the true velocity field and the run
    /// protocol; `None` when the mean flow is negligible (no inflow face).
    pub fn from_mean_flow(
        v_true: &VectorVolume,
        interval: f64,
        max_diameter: f64,
    ) -> Option<TransitExclusion> {
        let whole = RegionMask::whole_domain(v_true.domain);
        let mean = mean_velocity(v_true, &whole);
        let mag = (mean[0] * mean[0] + mean[1] * mean[1] + mean[2] * mean[2]).sqrt();
        if mag < DIRECTION_EPSILON {
            return None;
        }
        let axis = (0..3)
            .max_by(|&a, &b| mean[a].abs().partial_cmp(&mean[b].abs()).unwrap())
            .unwrap();
        let travel = mean[axis].abs() * interval + max_diameter / 2.0;
        Some(TransitExclusion {
            axis,
            at_max_face: mean[axis] < 0.0,
            depth: (travel / v_true.domain.spacing).ceil() as usize,
        })
    }
}

/// The four errors with their provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Relative L2 error over the whole domain.
    pub re1: Option<f64>,
    /// Relative L2 error over the particle support.
    pub re2: Option<f64>,
    /// Projected mean-velocity error over the whole domain.
    pub re3: Option<f64>,
    /// Projected mean-velocity error over the particle support.
    pub re4: Option<f64>,
    /// Unit flow direction used for RE3/RE4 (whole-domain mean), when
    /// defined.
    pub flow_direction: Option<[f64; 3]>,
    pub support_threshold: f64,
    pub border_shell: usize,
    pub transit_exclusion: Option<TransitExclusion>,
    pub masked_voxels_domain: usize,
    pub masked_voxels_support: usize,
    /// Snapshot pairs that entered the averaged flow.
    pub snapshot_pairs: Vec<[usize; 2]>,
    /// Per-pair RE1 values, recorded as diagnostics.
    pub per_pair_re1: Vec<Option<f64>>,
}

/// Inputs to [`evaluate`].
pub struct EvaluateInputs<'a> {
    /// Time-averaged reconstructed velocity field.
    pub v_rec: &'a VectorVolume,
    /// Ground-truth velocity sampled on the grid.
    pub v_true: &'a VectorVolume,
    /// Per-pair reconstructed fields (diagnostics only; may be empty).
    pub per_pair: &'a [VectorVolume],
    /// Particle truth volume (pointwise max over snapshots).
    pub particle_truth: &'a ScalarVolume,
    pub support_threshold: f64,
    /// Border shell excluded from every mask, voxels.
    pub border_shell: usize,
    /// Inflow transit band excluded beyond the shell, if any.
    pub transit: Option<TransitExclusion>,
}

/// Compute RE1..RE4 for a scenario run.
pub fn evaluate(inputs: &EvaluateInputs) -> Result<ErrorReport> {
    let mut whole = RegionMask::whole_domain(inputs.v_true.domain);
    whole.exclude_border(inputs.border_shell);
    let mut support =
        RegionMask::particle_support(inputs.particle_truth, inputs.support_threshold)?;
    support.exclude_border(inputs.border_shell);
    if let Some(t) = inputs.transit {
        let depth = inputs.border_shell + t.depth;
        whole.exclude_face(t.axis, t.at_max_face, depth);
        support.exclude_face(t.axis, t.at_max_face, depth);
    }
    if support.count() == 0 {
        return Err(Error::validation(
            "particle support mask is empty after border exclusion",
        ));
    }

    let re1 = relative_l2(inputs.v_rec, inputs.v_true, &whole)?;
    let re2 = relative_l2(inputs.v_rec, inputs.v_true, &support)?;
    // The flow direction is a global property of the run: the whole-domain
    // mean of the truth. When it is undefined (symmetric flows average to
    // zero), both projected errors are undefined; RE4 projects the
    // support-restricted means onto the same global direction.
    let mt = mean_velocity(inputs.v_true, &whole);
    let mag = (mt[0] * mt[0] + mt[1] * mt[1] + mt[2] * mt[2]).sqrt();
    let flow_direction = if mag >= DIRECTION_EPSILON {
        Some([mt[0] / mag, mt[1] / mag, mt[2] / mag])
    } else {
        None
    };
    let (re3, re4) = match flow_direction {
        Some(dhat) => (
            projected_mean_error(inputs.v_rec, inputs.v_true, &whole, dhat)?,
            projected_mean_error(inputs.v_rec, inputs.v_true, &support, dhat)?,
        ),
        None => (None, None),
    };
    let per_pair_re1 = inputs
        .per_pair
        .iter()
        .map(|v| relative_l2(v, inputs.v_true, &whole))
        .collect::<Result<Vec<_>>>()?;

    Ok(ErrorReport {
        re1,
        re2,
        re3,
        re4,
        flow_direction,
        support_threshold: inputs.support_threshold,
        border_shell: inputs.border_shell,
        transit_exclusion: inputs.transit,
        masked_voxels_domain: whole.count(),
        masked_voxels_support: support.count(),
        snapshot_pairs: (0..inputs.per_pair.len())
            .map(|k| [k, k + 1])
            .collect(),
        per_pair_re1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rel_diff;

    fn unit_domain(n: usize) -> DomainSpec {
        DomainSpec::with_extent([1.0; 3], 1.0 / (n - 1) as f64).unwrap()
    }

    fn uniform_field(d: DomainSpec, v: [f64; 3]) -> VectorVolume {
        VectorVolume::from_fn(d, |_| v)
    }

    #[test]
    fn identical_fields_have_zero_error() {
        let d = unit_domain(9);
        let v = VectorVolume::from_fn(d, |p| [p[0], p[1], -p[2]]);
        let mask = RegionMask::whole_domain(d);
        assert_eq!(relative_l2(&v, &v, &mask).unwrap(), Some(0.0));
        assert_eq!(directional_error(&v, &v, &mask).unwrap(), Some(0.0));
    }

    #[test]
    fn zero_reconstruction_gives_unit_error() {
        let d = unit_domain(9);
        let v_true = uniform_field(d, [0.0, 1.0, 0.0]);
        let v_rec = VectorVolume::zeros(d);
        let mask = RegionMask::whole_domain(d);
        let re = relative_l2(&v_rec, &v_true, &mask).unwrap().unwrap();
        assert!(rel_diff(re, 1.0) < 1e-12);
    }

    #[test]
    fn scaled_reconstruction_relative_error() {
        let d = unit_domain(9);
        let v_true = VectorVolume::from_fn(d, |p| [p[2], 1.0 + p[0], 0.3]);
        let mut v_rec = v_true.clone();
        for comp in v_rec.components.iter_mut() {
            for v in comp.values.iter_mut() {
                *v *= 1.1;
            }
        }
        let mask = RegionMask::whole_domain(d);
        let re = relative_l2(&v_rec, &v_true, &mask).unwrap().unwrap();
        assert!(rel_diff(re, 0.1) < 1e-12, "re = {re}");
    }

    #[test]
    fn directional_error_projects_out_cross_components() {
        let d = unit_domain(9);
        let v_true = uniform_field(d, [0.0, 1.0, 0.0]);
        let v_rec = uniform_field(d, [0.3, 0.98, 0.0]);
        let mask = RegionMask::whole_domain(d);
        let re = directional_error(&v_rec, &v_true, &mask).unwrap().unwrap();
        assert!(rel_diff(re, 0.02) < 1e-12, "re = {re}");
    }

    #[test]
    fn zero_mean_truth_is_undefined() {
        let d = unit_domain(9);
        // odd in x2 about the domain centre: mean is ~0
        let v_true = VectorVolume::from_fn(d, |p| [0.0, p[1] - 0.5, 0.0]);
        let v_rec = uniform_field(d, [0.0, 0.2, 0.0]);
        let mask = RegionMask::whole_domain(d);
        assert_eq!(directional_error(&v_rec, &v_true, &mask).unwrap(), None);
    }

    #[test]
    fn errors_are_scale_invariant() {
        let d = unit_domain(9);
        let v_true = VectorVolume::from_fn(d, |p| [p[0] - 0.2, 1.0, p[1]]);
        let v_rec = VectorVolume::from_fn(d, |p| [p[0], 0.9, p[1] + 0.1]);
        let mask = RegionMask::whole_domain(d);
        let scale = |v: &VectorVolume, alpha: f64| {
            let mut out = v.clone();
            for c in out.components.iter_mut() {
                for x in c.values.iter_mut() {
                    *x *= alpha;
                }
            }
            out
        };
        let re = relative_l2(&v_rec, &v_true, &mask).unwrap().unwrap();
        let de = directional_error(&v_rec, &v_true, &mask).unwrap().unwrap();
        for alpha in [3.0, 0.125] {
            let re_s = relative_l2(&scale(&v_rec, alpha), &scale(&v_true, alpha), &mask)
                .unwrap()
                .unwrap();
            let de_s =
                directional_error(&scale(&v_rec, alpha), &scale(&v_true, alpha), &mask)
                    .unwrap()
                    .unwrap();
            assert!((re - re_s).abs() < 1e-12);
            assert!((de - de_s).abs() < 1e-12);
        }
    }

    #[test]
    fn adding_projection_orthogonal_field_leaves_directional_error() {
        let d = unit_domain(9);
        let v_true = uniform_field(d, [0.0, 2.0, 0.0]);
        let v_rec = uniform_field(d, [0.1, 1.9, 0.0]);
        // w has zero mean along dhat = e2
        let w = VectorVolume::from_fn(d, |p| [5.0 * p[2], 3.0 * (p[1] - 0.5), 1.0]);
        let mut v_rec2 = v_rec.clone();
        for a in 0..3 {
            for (x, y) in v_rec2.components[a]
                .values
                .iter_mut()
                .zip(&w.components[a].values)
            {
                *x += y;
            }
        }
        let mask = RegionMask::whole_domain(d);
        let e1 = directional_error(&v_rec, &v_true, &mask).unwrap().unwrap();
        let e2 = directional_error(&v_rec2, &v_true, &mask).unwrap().unwrap();
        assert!((e1 - e2).abs() < 1e-12, "{e1} vs {e2}");
    }

    #[test]
    fn mask_threshold_predicate_is_exact() {
        let d = unit_domain(9);
        let f = ScalarVolume::from_fn(d, |p| (p[0] + p[1] + p[2]) / 3.0);
        let mask = RegionMask::particle_support(&f, 0.5).unwrap();
        let cut = 0.5 * f.max_value();
        for (i, &sel) in mask.selected.iter().enumerate() {
            assert_eq!(sel, f.values[i] > cut, "voxel {i}");
        }
    }

    #[test]
    fn border_exclusion_removes_shell() {
        let d = unit_domain(9);
        let mut mask = RegionMask::whole_domain(d);
        mask.exclude_border(2);
        let [n1, n2, n3] = d.dims();
        assert_eq!(mask.count(), (n1 - 4) * (n2 - 4) * (n3 - 4));
    }

    #[test]
    fn face_exclusion_is_one_sided() {
        let d = unit_domain(9);
        let mut mask = RegionMask::whole_domain(d);
        mask.exclude_face(1, false, 3);
        let [n1, n2, n3] = d.dims();
        assert_eq!(mask.count(), n1 * (n2 - 3) * n3);
        assert!(!mask.selected[d.offset(4, 2, 4)]);
        assert!(mask.selected[d.offset(4, 3, 4)]);
        let mut mask = RegionMask::whole_domain(d);
        mask.exclude_face(1, true, 3);
        assert!(mask.selected[d.offset(4, 5, 4)]);
        assert!(!mask.selected[d.offset(4, 6, 4)]);
    }

    #[test]
    fn transit_exclusion_follows_the_mean_flow() {
        let d = unit_domain(9);
        // one frame of travel (0.25 m) + radius (0.05) at h = 0.125
        let v = uniform_field(d, [0.0, -0.5, 0.0]);
        let t = TransitExclusion::from_mean_flow(&v, 0.5, 0.1).unwrap();
        assert_eq!(t.axis, 1);
        assert!(t.at_max_face, "inflow is the max face for negative flow");
        assert_eq!(t.depth, ((0.25 + 0.05) / 0.125_f64).ceil() as usize);
        // symmetric flows have no inflow face
        let vortex = VectorVolume::from_fn(d, |p| [0.0, p[1] - 0.5, 0.0]);
        assert!(TransitExclusion::from_mean_flow(&vortex, 0.5, 0.1).is_none());
    }

    #[test]
    fn evaluate_perfect_reconstruction_is_all_zero() {
        let d = unit_domain(9);
        let v_true = uniform_field(d, [0.0, 1.0, 0.0]);
        let particles = ScalarVolume::from_fn(d, |p| {
            let r2: f64 = (0..3).map(|a| (p[a] - 0.5).powi(2)).sum();
            if r2 < 0.04 {
                1.0
            } else {
                0.0
            }
        });
        let report = evaluate(&EvaluateInputs {
            v_rec: &v_true,
            v_true: &v_true,
            per_pair: &[],
            particle_truth: &particles,
            support_threshold: 0.5,
            border_shell: 1,
            transit: None,
        })
        .unwrap();
        assert_eq!(report.re1, Some(0.0));
        assert_eq!(report.re2, Some(0.0));
        assert_eq!(report.re3, Some(0.0));
        assert_eq!(report.re4, Some(0.0));
        assert!(report.flow_direction.is_some());
    }

    #[test]
    fn evaluate_symmetric_truth_reports_undefined_projections() {
        let d = unit_domain(9);
        let v_true = VectorVolume::from_fn(d, |p| {
            [
                (std::f64::consts::PI * p[0]).sin() * (std::f64::consts::PI * p[1]).cos(),
                -(std::f64::consts::PI * p[0]).cos() * (std::f64::consts::PI * p[1]).sin(),
                0.0,
            ]
        });
        let v_rec = VectorVolume::zeros(d);
        let particles = ScalarVolume::from_fn(d, |p| {
            if (p[0] - 0.4).abs() < 0.2 {
                1.0
            } else {
                0.0
            }
        });
        let report = evaluate(&EvaluateInputs {
            v_rec: &v_rec,
            v_true: &v_true,
            per_pair: &[],
            particle_truth: &particles,
            support_threshold: 0.5,
            border_shell: 1,
            transit: None,
        })
        .unwrap();
        assert!(report.re1.is_some());
        assert!(report.re2.is_some());
        assert_eq!(report.re3, None, "whole-domain mean of the vortex is zero");
        assert!(report.flow_direction.is_none());
    }
}
