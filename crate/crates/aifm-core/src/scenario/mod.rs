//! Ground-truth velocity fields, particle seeding/advection, and
//! rasterisation into per-snapshot particle volumes.

mod ingest;

pub use ingest::ingest_cfd_field;

use crate::error::{Error, Result};
use crate::volume::{DomainSpec, ScalarVolume, VectorVolume};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// A spherical tracer particle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub center: [f64; 3],
    pub diameter: f64,
}

/// Velocity-field scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScenarioKind {
    /// Uniform velocity everywhere.
    Constant { velocity: [f64; 3] },
    /// Stacked 2D vortex sheet, independent of depth:
    /// `(A sin(pi x1) cos(pi x2), -A cos(pi x1) sin(pi x2), 0)`.
    TaylorGreen { amplitude: f64 },
    /// Velocity field resampled from an external file (CSV or vector
    /// volume container).
    TJunctionImport { path: std::path::PathBuf },
    /// Analytic stand-in for a branch-channel junction flow; see
    /// [`tjunction_surrogate_velocity`] for the model.
    TJunctionSurrogate {
        /// Angle between main and branch channel, radians, in (0, pi).
        theta: f64,
        /// Branch channel width, metres.
        width: f64,
        /// Distance of the measurement box from the junction along the
        /// branch, metres.
        distance: f64,
        /// Main-channel inlet speed, m/s.
        inlet_speed: f64,
    },
}

/// Scenario plus particle-generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    #[serde(flatten)]
    pub kind: ScenarioKind,
    pub particle_count: usize,
    /// Particle diameter range, metres.
    pub diameter_range: [f64; 2],
    /// Margin between any sphere surface and the domain boundary, metres.
    pub margin: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.particle_count < 1 {
            return Err(Error::validation("particle count must be >= 1"));
        }
        let [lo, hi] = self.diameter_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::validation(format!(
                "diameter range [{lo}, {hi}] must satisfy 0 < lo <= hi"
            )));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::validation("margin must be >= 0"));
        }
        match &self.kind {
            ScenarioKind::TaylorGreen { amplitude } => {
                if !amplitude.is_finite() {
                    return Err(Error::validation("amplitude must be finite"));
                }
            }
            ScenarioKind::TJunctionSurrogate {
                theta,
                width,
                distance,
                inlet_speed,
            } => {
                if !(*theta > 0.0 && *theta < PI) {
                    return Err(Error::validation(format!(
                        "junction angle {theta} must lie in (0, pi)"
                    )));
                }
                if !(*width > 0.0) {
                    return Err(Error::validation("branch width must be > 0"));
                }
                if !(*distance >= 0.0) {
                    return Err(Error::validation("junction distance must be >= 0"));
                }
                if !(*inlet_speed >= 0.0) {
                    return Err(Error::validation("inlet speed must be >= 0"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Main-channel cross-section of the junction geometry (width x depth),
/// fixed by the reference setup: 5 m wide, 1 m deep.
const JUNCTION_MAIN_WIDTH: f64 = 5.0;

/// Analytic junction-branch velocity at a point of the measurement box.
///
/// Model: plug flow along the branch axis (`x2`), with the mean speed set
/// by an area-weighted flux split between the main-channel outlet and the
/// branch opening (projected by `sin(theta)`), plus an irrotational,
/// divergence-free corner perturbation that decays like the slowest
/// channel mode `exp(-pi d / W)` with distance `d` from the junction:
///
/// `v2 = U_b (1 + cos(theta) e^{-pi (L + x2)/W} cos(pi x1 / W))`
/// `v1 = -U_b  cos(theta) e^{-pi (L + x2)/W} sin(pi x1 / W)`
///
/// The cross component vanishes on both branch walls, and the whole
/// perturbation vanishes as `theta -> pi/2` (a square junction) or as the
/// box moves away from the junction, where the flow reduces to a straight
/// plug.
pub fn tjunction_surrogate_velocity(
    theta: f64,
    width: f64,
    distance: f64,
    inlet_speed: f64,
    point: [f64; 3],
) -> [f64; 3] {
    let opening = width * theta.sin();
    let branch_fraction = opening / (JUNCTION_MAIN_WIDTH + opening);
    let mean_speed = inlet_speed * JUNCTION_MAIN_WIDTH * branch_fraction / width;
    let decay = (-PI * (distance + point[1]) / width).exp();
    let swirl = theta.cos() * decay;
    let across = PI * point[0] / width;
    [
        -mean_speed * swirl * across.sin(),
        mean_speed * (1.0 + swirl * across.cos()),
        0.0,
    ]
}

/// Ground-truth velocity at a point. `imported` must be supplied for
/// `TJunctionImport` (load it once via [`ingest_cfd_field`]).
pub fn velocity_at(
    kind: &ScenarioKind,
    imported: Option<&VectorVolume>,
    point: [f64; 3],
    _t: f64,
) -> Result<[f64; 3]> {
    match kind {
        ScenarioKind::Constant { velocity } => Ok(*velocity),
        ScenarioKind::TaylorGreen { amplitude } => {
            let a = *amplitude;
            Ok([
                a * (PI * point[0]).sin() * (PI * point[1]).cos(),
                -a * (PI * point[0]).cos() * (PI * point[1]).sin(),
                0.0,
            ])
        }
        ScenarioKind::TJunctionImport { path } => {
            let vol = imported.ok_or_else(|| {
                Error::validation(format!(
                    "imported velocity field {path:?} has not been loaded"
                ))
            })?;
            vol.sample(point)
        }
        ScenarioKind::TJunctionSurrogate {
            theta,
            width,
            distance,
            inlet_speed,
        } => Ok(tjunction_surrogate_velocity(
            *theta,
            *width,
            *distance,
            *inlet_speed,
            point,
        )),
    }
}

/// Sample the scenario velocity on every grid node.
pub fn velocity_volume(
    kind: &ScenarioKind,
    imported: Option<&VectorVolume>,
    domain: DomainSpec,
    t: f64,
) -> Result<VectorVolume> {
    let mut out = VectorVolume::zeros(domain);
    let [n1, n2, n3] = domain.dims();
    for i1 in 0..n1 {
        for i2 in 0..n2 {
            for i3 in 0..n3 {
                let v = velocity_at(kind, imported, domain.node_position(i1, i2, i3), t)?;
                let off = domain.offset(i1, i2, i3);
                for a in 0..3 {
                    out.components[a].values[off] = v[a];
                }
            }
        }
    }
    Ok(out)
}

/// Admissible center interval per axis for a particle of radius `r`.
fn center_bounds(domain: &DomainSpec, margin: f64, radius: f64) -> Result<[(f64, f64); 3]> {
    let mut out = [(0.0, 0.0); 3];
    for a in 0..3 {
        let lo = domain.origin[a] + margin + radius;
        let hi = domain.origin[a] + domain.extent[a] - margin - radius;
        if !(hi > lo) {
            return Err(Error::validation(format!(
                "no admissible particle region on axis {a}: margin {margin} + radius {radius} \
                 exceed extent {}",
                domain.extent[a]
            )));
        }
        out[a] = (lo, hi);
    }
    Ok(out)
}

/// Seed `spec.particle_count` spheres uniformly over the admissible region,
/// diameters uniform in `spec.diameter_range`. Pure function of the seed.
pub fn seed_particles(spec: &ScenarioSpec, domain: &DomainSpec) -> Result<Vec<Particle>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.particle_count);
    for _ in 0..spec.particle_count {
        out.push(sample_particle(spec, domain, &mut rng)?);
    }
    Ok(out)
}

fn sample_particle(
    spec: &ScenarioSpec,
    domain: &DomainSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Particle> {
    let [dlo, dhi] = spec.diameter_range;
    let diameter = if dhi > dlo {
        rng.gen_range(dlo..=dhi)
    } else {
        dlo
    };
    let bounds = center_bounds(domain, spec.margin, diameter / 2.0)?;
    let mut center = [0.0; 3];
    for a in 0..3 {
        center[a] = rng.gen_range(bounds[a].0..=bounds[a].1);
    }
    Ok(Particle { center, diameter })
}

/// One RK4 step of every particle centre through the scenario velocity.
///
/// A particle advects freely until its sphere has fully left the physical
/// domain; it is then re-injected just outside the inflow face (the face
/// through which the mean velocity enters) with a fresh diameter and
/// uniform in-plane position, so blobs slide out of and into the
/// measurement box instead of popping, and the particle count stays
/// constant. When the mean velocity is negligible, exited particles are
/// re-seeded uniformly instead. The re-injection stream is deterministic
/// given the spec seed and the step index.
pub fn advect(
    particles: &[Particle],
    spec: &ScenarioSpec,
    imported: Option<&VectorVolume>,
    domain: &DomainSpec,
    dt: f64,
    step_index: u64,
) -> Result<Vec<Particle>> {
    let vel = |p: [f64; 3], t: f64| velocity_at(&spec.kind, imported, p, t);
    // Sample the mean flow to pick the inflow face once per call.
    let mean = mean_velocity(&spec.kind, imported, domain)?;
    let mean_mag = (mean[0].powi(2) + mean[1].powi(2) + mean[2].powi(2)).sqrt();
    let inflow_axis = (0..3).max_by(|&a, &b| {
        mean[a].abs().partial_cmp(&mean[b].abs()).unwrap()
    });
    let max_corner = domain.max_corner();
    let mut rng = ChaCha8Rng::seed_from_u64(reinjection_seed(spec.seed, step_index));
    let mut out = Vec::with_capacity(particles.len());
    for p in particles {
        let c = p.center;
        let k1 = vel(c, 0.0)?;
        let k2 = vel(offset(c, &k1, dt / 2.0), dt / 2.0)?;
        let k3 = vel(offset(c, &k2, dt / 2.0), dt / 2.0)?;
        let k4 = vel(offset(c, &k3, dt), dt)?;
        let mut next = c;
        for a in 0..3 {
            next[a] += dt / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]);
        }
        let r = p.diameter / 2.0;
        let gone = (0..3)
            .any(|a| next[a] < domain.origin[a] - r || next[a] > max_corner[a] + r);
        if !gone {
            out.push(Particle {
                center: next,
                diameter: p.diameter,
            });
        } else if mean_mag > 1e-12 {
            // fresh sphere just outside the inflow face, sliding in
            let axis = inflow_axis.unwrap();
            let fresh = sample_particle(spec, domain, &mut rng)?;
            let fr = fresh.diameter / 2.0;
            let mut center = fresh.center;
            center[axis] = if mean[axis] > 0.0 {
                domain.origin[axis] - fr
            } else {
                max_corner[axis] + fr
            };
            out.push(Particle {
                center,
                diameter: fresh.diameter,
            });
        } else {
            out.push(sample_particle(spec, domain, &mut rng)?);
        }
    }
    Ok(out)
}

fn offset(c: [f64; 3], v: &[f64; 3], s: f64) -> [f64; 3] {
    [c[0] + s * v[0], c[1] + s * v[1], c[2] + s * v[2]]
}

/// Re-injection RNG stream: distinct from the seeding stream and from
/// every other advection step.
fn reinjection_seed(seed: u64, step: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(step.wrapping_add(1))
}

/// Mean scenario velocity over the domain (coarse 5x5x5 probe).
fn mean_velocity(
    kind: &ScenarioKind,
    imported: Option<&VectorVolume>,
    domain: &DomainSpec,
) -> Result<[f64; 3]> {
    let mut acc = [0.0; 3];
    let n = 5;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let p = [
                    domain.origin[0] + domain.extent[0] * (i as f64 + 0.5) / n as f64,
                    domain.origin[1] + domain.extent[1] * (j as f64 + 0.5) / n as f64,
                    domain.origin[2] + domain.extent[2] * (k as f64 + 0.5) / n as f64,
                ];
                let v = velocity_at(kind, imported, p, 0.0)?;
                for a in 0..3 {
                    acc[a] += v[a];
                }
            }
        }
    }
    let count = (n * n * n) as f64;
    Ok([acc[0] / count, acc[1] / count, acc[2] / count])
}

/// Rasterise spheres into a node-sampled indicator (1 inside any sphere),
/// then smooth with a normalised isotropic Gaussian of standard deviation
/// `smoothing` metres (0 disables smoothing). Values stay in [0, 1].
pub fn rasterize(particles: &[Particle], domain: DomainSpec, smoothing: f64) -> ScalarVolume {
    let [n1, n2, n3] = domain.dims();
    let h = domain.spacing;
    let mut vol = ScalarVolume::zeros(domain);
    for p in particles {
        let r = p.diameter / 2.0;
        let r2 = r * r;
        // only visit the bounding box of the sphere
        let clamp = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
        let lo = |c: f64, o: f64| ((c - r - o) / h).floor();
        let hi = |c: f64, o: f64| ((c + r - o) / h).ceil();
        let (l1, h1) = (
            clamp(lo(p.center[0], domain.origin[0]), n1),
            clamp(hi(p.center[0], domain.origin[0]), n1),
        );
        let (l2, h2) = (
            clamp(lo(p.center[1], domain.origin[1]), n2),
            clamp(hi(p.center[1], domain.origin[1]), n2),
        );
        let (l3, h3) = (
            clamp(lo(p.center[2], domain.origin[2]), n3),
            clamp(hi(p.center[2], domain.origin[2]), n3),
        );
        for i1 in l1..=h1 {
            for i2 in l2..=h2 {
                for i3 in l3..=h3 {
                    let x = domain.node_position(i1, i2, i3);
                    let d2: f64 = (0..3).map(|a| (x[a] - p.center[a]).powi(2)).sum();
                    if d2 <= r2 {
                        vol.set(i1, i2, i3, 1.0);
                    }
                }
            }
        }
    }
    if smoothing > 0.0 {
        gaussian_smooth(&mut vol, smoothing);
    }
    vol
}

/// Separable Gaussian smoothing with a normalised, truncated kernel
/// (radius 3 sigma) and zero padding.
pub fn gaussian_smooth(vol: &mut ScalarVolume, sigma_meters: f64) {
    let h = vol.domain.spacing;
    let sigma = sigma_meters / h; // voxels
    let radius = (3.0 * sigma).ceil() as usize;
    if radius == 0 {
        return;
    }
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for k in -(radius as isize)..=(radius as isize) {
        kernel.push((-(k as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }
    let [n1, n2, n3] = vol.domain.dims();
    let dims = [n1, n2, n3];
    let mut scratch = vec![0.0; vol.values.len()];
    for axis in 0..3 {
        let stride = match axis {
            0 => n2 * n3,
            1 => n3,
            _ => 1,
        };
        let n_axis = dims[axis];
        scratch.fill(0.0);
        // iterate over all lines along `axis`
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
                    for (ki, k) in kernel.iter().enumerate() {
                        let j = i as isize + ki as isize - radius as isize;
                        if j >= 0 && (j as usize) < n_axis {
                            acc += k * vol.values[start + j as usize * stride];
                        }
                    }
                    scratch[start + i * stride] = acc;
                }
            }
        }
        std::mem::swap(&mut vol.values, &mut scratch);
    }
}
