//! Plane-wave Ricker sources, receiver arrays and the 3D wave solver.
//!
//! The model domain is a box: the `x3 = L3` plane is the free surface
//! (pressure release, homogeneous Dirichlet), every other face is rigid
//! (homogeneous Neumann). Boundary reflections are part of the physics,
//! not noise.

mod solver;
mod source;

pub use solver::{PropagateOptions, PropagateOutput, SpongeConfig, WaveSolver};
pub use source::{fibonacci_directions, ricker_lambda};

use crate::error::{Error, Result};
use crate::volume::DomainSpec;
use serde::{Deserialize, Serialize};

/// Unit-norm tolerance for emission directions.
const DIRECTION_NORM_TOL: f64 = 1e-12;

/// A travelling plane wave with a Ricker time profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneWaveSource {
    /// Propagation direction, unit vector.
    pub direction: [f64; 3],
    /// Ricker central frequency, Hz.
    pub central_frequency: f64,
    /// Sound speed used for the travel-time term, m/s.
    pub sound_speed: f64,
}

impl PlaneWaveSource {
    pub fn new(direction: [f64; 3], central_frequency: f64, sound_speed: f64) -> Result<Self> {
        let norm = (direction[0].powi(2) + direction[1].powi(2) + direction[2].powi(2)).sqrt();
        if (norm - 1.0).abs() > DIRECTION_NORM_TOL {
            return Err(Error::validation(format!(
                "direction {direction:?} has norm {norm}, must be 1 within {DIRECTION_NORM_TOL:e}"
            )));
        }
        if !(central_frequency > 0.0) {
            return Err(Error::validation("central frequency must be > 0"));
        }
        if !(sound_speed > 0.0) {
            return Err(Error::validation("sound speed must be > 0"));
        }
        Ok(PlaneWaveSource {
            direction,
            central_frequency,
            sound_speed,
        })
    }

    /// Emitted field value at a point and time.
    pub fn evaluate(&self, point: [f64; 3], t: f64) -> f64 {
        ricker_lambda(self, point, t)
    }

    /// Onset delay `3/(pi q0)`: the wavelet peak passes the phase origin
    /// at this time.
    pub fn onset_delay(&self) -> f64 {
        3.0 / (std::f64::consts::PI * self.central_frequency)
    }

    /// Effective time support of the wavelet around its peak; outside
    /// `|tau| > support`, the amplitude is below f64 resolution.
    pub fn effective_support(&self) -> f64 {
        // exp(-pi^2 q0^2 tau^2) < 1e-17  <=>  pi q0 |tau| > sqrt(39.2)
        6.27 / (std::f64::consts::PI * self.central_frequency)
    }
}

/// Ordered set of emission directions sharing frequency and sound speed.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSet {
    pub sources: Vec<PlaneWaveSource>,
}

impl SourceSet {
    pub fn new(sources: Vec<PlaneWaveSource>) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::validation("source set needs at least one source"));
        }
        for i in 0..sources.len() {
            for j in i + 1..sources.len() {
                if sources[i].direction == sources[j].direction {
                    return Err(Error::validation(format!(
                        "sources {i} and {j} share direction {:?}",
                        sources[i].direction
                    )));
                }
            }
        }
        Ok(SourceSet { sources })
    }

    /// Fibonacci-lattice directions at the given frequency and speed.
    pub fn fibonacci(m: usize, central_frequency: f64, sound_speed: f64) -> Result<Self> {
        let dirs = fibonacci_directions(m)?;
        let sources = dirs
            .into_iter()
            .map(|d| PlaneWaveSource::new(d, central_frequency, sound_speed))
            .collect::<Result<Vec<_>>>()?;
        SourceSet::new(sources)
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

/// Which faces carry receivers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReceiverLayout {
    /// All six box faces.
    AllAround6,
    /// The two sidewalls (x1 faces), the bed and the free surface.
    WallsAndSurface4,
    /// The two sidewalls only.
    Sidewalls2,
    /// Caller-supplied positions.
    Explicit,
}

impl ReceiverLayout {
    /// Faces as (axis, at_max_face) pairs; `Explicit` has none.
    fn faces(self) -> &'static [(usize, bool)] {
        match self {
            ReceiverLayout::AllAround6 => &[
                (0, false),
                (0, true),
                (1, false),
                (1, true),
                (2, false),
                (2, true),
            ],
            ReceiverLayout::WallsAndSurface4 => {
                &[(0, false), (0, true), (2, false), (2, true)]
            }
            ReceiverLayout::Sidewalls2 => &[(0, false), (0, true)],
            ReceiverLayout::Explicit => &[],
        }
    }

    pub fn face_count(self) -> usize {
        self.faces().len()
    }
}

/// Receiver positions on the collection surface, strictly inside the domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceiverArray {
    pub layout: ReceiverLayout,
    /// Per-face grid resolution (resolution^2 receivers per face).
    pub resolution: usize,
    /// Offset of the collection surface from the boundary, metres.
    pub inset: f64,
    pub positions: Vec<[f64; 3]>,
}

impl ReceiverArray {
    /// Generate the per-face receiver grids for a non-explicit layout.
    ///
    /// Each face carries a `resolution x resolution` grid at distance
    /// `inset` from its own face; in-plane coordinates span
    /// `[inset, extent - inset]` so every receiver keeps at least `inset`
    /// distance from every other face.
    pub fn generate(
        layout: ReceiverLayout,
        resolution: usize,
        inset: f64,
        domain: &DomainSpec,
    ) -> Result<Self> {
        if layout == ReceiverLayout::Explicit {
            return Err(Error::validation(
                "explicit layout requires explicit positions; use ReceiverArray::explicit",
            ));
        }
        if resolution == 0 {
            return Err(Error::validation("receiver resolution must be >= 1"));
        }
        if !(inset > 0.0) {
            return Err(Error::validation("receiver inset must be > 0"));
        }
        for (axis, &e) in domain.extent.iter().enumerate() {
            if 2.0 * inset >= e {
                return Err(Error::validation(format!(
                    "inset {inset} too large for extent[{axis}] = {e}"
                )));
            }
        }
        let mut positions = Vec::with_capacity(layout.face_count() * resolution * resolution);
        let inplane = |axis: usize, k: usize| -> f64 {
            let lo = domain.origin[axis] + inset;
            let hi = domain.origin[axis] + domain.extent[axis] - inset;
            if resolution == 1 {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * k as f64 / (resolution - 1) as f64
            }
        };
        for &(axis, at_max) in layout.faces() {
            let normal_coord = if at_max {
                domain.origin[axis] + domain.extent[axis] - inset
            } else {
                domain.origin[axis] + inset
            };
            let (a, b) = match axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            for ka in 0..resolution {
                for kb in 0..resolution {
                    let mut p = [0.0; 3];
                    p[axis] = normal_coord;
                    p[a] = inplane(a, ka);
                    p[b] = inplane(b, kb);
                    positions.push(p);
                }
            }
        }
        Ok(ReceiverArray {
            layout,
            resolution,
            inset,
            positions,
        })
    }

    /// Caller-provided receiver positions; all must lie strictly inside.
    pub fn explicit(positions: Vec<[f64; 3]>, domain: &DomainSpec) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::validation("receiver array must not be empty"));
        }
        let max = domain.max_corner();
        for (s, p) in positions.iter().enumerate() {
            let inside =
                (0..3).all(|a| p[a] > domain.origin[a] && p[a] < max[a]);
            if !inside {
                return Err(Error::validation(format!(
                    "receiver {s} at {p:?} is not strictly inside the domain"
                )));
            }
        }
        Ok(ReceiverArray {
            layout: ReceiverLayout::Explicit,
            resolution: 0,
            inset: 0.0,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Recorded pressure traces: `n_sources x n_receivers x n_steps`,
/// time fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub n_sources: usize,
    pub n_receivers: usize,
    pub n_steps: usize,
    /// Solver time step between samples, seconds.
    pub sample_interval: f64,
    pub samples: Vec<f64>,
}

impl TraceSet {
    pub fn zeros(n_sources: usize, n_receivers: usize, n_steps: usize, dt: f64) -> Self {
        TraceSet {
            n_sources,
            n_receivers,
            n_steps,
            sample_interval: dt,
            samples: vec![0.0; n_sources * n_receivers * n_steps],
        }
    }

    #[inline]
    pub fn sample(&self, source: usize, receiver: usize, step: usize) -> f64 {
        self.samples[step + self.n_steps * (receiver + self.n_receivers * source)]
    }

    /// All traces of one source, receiver-major.
    pub fn source_block(&self, source: usize) -> &[f64] {
        let block = self.n_receivers * self.n_steps;
        &self.samples[source * block..(source + 1) * block]
    }

    pub fn source_block_mut(&mut self, source: usize) -> &mut [f64] {
        let block = self.n_receivers * self.n_steps;
        &mut self.samples[source * block..(source + 1) * block]
    }

    pub fn all_finite(&self) -> bool {
        self.samples.iter().all(|v| v.is_finite())
    }
}

/// Explicit-scheme settings. The CFL invariant uses the second-order bound
/// `dt <= cfl_safety * h / (c_max * sqrt(3))`; higher stencil orders remain
/// stable for every `cfl_safety < 0.78` (their bounds are 0.87 and 0.78 of
/// the second-order one for orders 4 and 8).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Time step, seconds.
    pub dt: f64,
    /// Even spatial stencil order: 2, 4 or 8.
    pub spatial_order: usize,
    /// Fraction of the CFL bound the time step may use, in (0, 1).
    pub cfl_safety: f64,
    /// Receivers record every k-th solver step (1 = every step).
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

fn default_record_every() -> usize {
    1
}

impl SolverConfig {
    /// The second-order stability bound `h / (c_max sqrt(3))`.
    pub fn cfl_bound(spacing: f64, c_max: f64) -> f64 {
        spacing / (c_max * 3.0_f64.sqrt())
    }

    /// Largest admissible dt for this config on a given grid.
    pub fn max_dt(&self, spacing: f64, c_max: f64) -> f64 {
        self.cfl_safety * Self::cfl_bound(spacing, c_max)
    }

    /// Config with dt set to the admissible maximum.
    pub fn at_cfl(spacing: f64, c_max: f64, spatial_order: usize, cfl_safety: f64) -> Self {
        let cfg = SolverConfig {
            dt: cfl_safety * Self::cfl_bound(spacing, c_max),
            spatial_order,
            cfl_safety,
            record_every: 1,
        };
        debug_assert!(cfg.validate(spacing, c_max).is_ok());
        cfg
    }

    pub fn validate(&self, spacing: f64, c_max: f64) -> Result<()> {
        if !matches!(self.spatial_order, 2 | 4 | 8) {
            return Err(Error::validation(format!(
                "spatial order must be 2, 4 or 8, got {}",
                self.spatial_order
            )));
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety < 1.0) {
            return Err(Error::validation(format!(
                "cfl_safety must be in (0,1), got {}",
                self.cfl_safety
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::validation("dt must be > 0"));
        }
        if self.record_every < 1 {
            return Err(Error::validation("record_every must be >= 1"));
        }
        let bound = self.max_dt(spacing, c_max);
        if self.dt > bound {
            return Err(Error::validation(format!(
                "dt = {} violates the CFL bound {} (= {} * h/(c*sqrt(3)))",
                self.dt, bound, self.cfl_safety
            )));
        }
        Ok(())
    }
}
