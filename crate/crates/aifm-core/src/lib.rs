//! Acoustic inversion flow measurement, end to end: probe a synthetic
//! particle-laden channel with multi-directional plane waves, reconstruct
//! per-snapshot particle volumes by inverting the wave equation's source
//! term, then recover the velocity field from consecutive reconstructions
//! with dense 3D optical flow.
//!
//! Modules follow the pipeline order:
//!
//! - [`volume`]: grids, scalar/vector fields, interpolation, persistence
//! - [`acoustics`]: Ricker plane-wave sources, receivers, the wave solver
//!   and its exact adjoint
//! - [`inverse`]: least-squares particle reconstruction (CG on the normal
//!   equations)
//! - [`scenario`]: ground-truth flows, particle seeding/advection and
//!   rasterisation
//! - [`flow3d`]: polynomial-expansion optical flow between reconstructions
//! - [`metrics`]: the four relative-error measures with region masks
//! - [`pipeline`]: experiment configuration, presets, cached stage runner
//!   and parameter sweeps

pub mod acoustics;
pub mod error;
pub mod flow3d;
pub mod inverse;
pub mod metrics;
pub mod pipeline;
pub mod scenario;
pub mod util;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{DomainSpec, ScalarVolume, SnapshotSchedule, VectorVolume};
