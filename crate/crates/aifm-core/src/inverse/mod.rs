//! Particle-volume reconstruction from recorded traces.
//!
//! The forward map is linear in the particle volume, so the least-squares
//! objective
//!
//! `J(f) = 1/2 sum_m sum_s || F_s(f; lambda_m) - d_s(.; lambda_m) ||^2`
//!
//! (discrete L2 in time, left-endpoint rule with weight dt) is quadratic
//! and is minimised by conjugate gradients on the normal equations (CGLS).
//! Each iteration costs one forward and one adjoint application; the
//! residual norm, and therefore the objective history, is non-increasing.

use crate::acoustics::{SolverConfig, SourceSet, SpongeConfig, TraceSet, WaveSolver};
use crate::acoustics::ReceiverArray;
use crate::error::{Error, Result};
use crate::util::{stable_norm_sq, xpby};
use crate::volume::{DomainSpec, ScalarVolume};

/// Relative gradient-norm floor for early stopping.
const GRADIENT_STOP_RTOL: f64 = 1e-12;

/// Everything needed to reconstruct one snapshot.
#[derive(Debug)]
pub struct InversionProblem {
    pub domain: DomainSpec,
    pub sources: SourceSet,
    pub observed: TraceSet,
    solver: WaveSolver,
}

impl InversionProblem {
    pub fn new(
        domain: DomainSpec,
        sound_speed: &ScalarVolume,
        sources: SourceSet,
        receivers: &ReceiverArray,
        observed: TraceSet,
        config: SolverConfig,
        probe_window: f64,
        sponge: Option<SpongeConfig>,
    ) -> Result<Self> {
        let solver = WaveSolver::new(domain, sound_speed, config, receivers, probe_window, sponge)?;
        if observed.n_sources != sources.len()
            || observed.n_receivers != receivers.len()
            || observed.n_steps != solver.n_recorded()
        {
            return Err(Error::validation(format!(
                "observed traces {}x{}x{} inconsistent with sources/receivers/window \
                 {}x{}x{}",
                observed.n_sources,
                observed.n_receivers,
                observed.n_steps,
                sources.len(),
                receivers.len(),
                solver.n_recorded()
            )));
        }
        Ok(InversionProblem {
            domain,
            sources,
            observed,
            solver,
        })
    }

    pub fn solver(&self) -> &WaveSolver {
        &self.solver
    }

    /// Quadrature weight of the trace-time inner product.
    fn dt(&self) -> f64 {
        self.solver.sample_interval()
    }

    fn cell_volume(&self) -> f64 {
        self.domain.spacing.powi(3)
    }

    /// `1/2 * sample_interval * ||A f - d||^2` over all sources and
    /// receivers (discrete left-endpoint time quadrature).
    pub fn objective(&self, f: &ScalarVolume) -> Result<f64> {
        let predicted = self.solver.forward_all(f, &self.sources)?;
        let mut acc = 0.0;
        for (p, o) in predicted.samples.iter().zip(&self.observed.samples) {
            let r = p - o;
            acc += r * r;
        }
        Ok(0.5 * self.dt() * acc)
    }

    /// Gradient of the objective in the volume inner product
    /// `<u, v> = h^3 sum u v`: one forward solve for the residual, one
    /// adjoint solve per source with the residual injected at the
    /// receivers. The adjoint is the exact transpose of the forward map,
    /// so `(J(f + e d) - J(f - e d)) / 2e = h^3 <grad, d>` to rounding.
    pub fn gradient(&self, f: &ScalarVolume) -> Result<ScalarVolume> {
        let predicted = self.solver.forward_all(f, &self.sources)?;
        let mut residual = predicted;
        for (r, o) in residual.samples.iter_mut().zip(&self.observed.samples) {
            *r -= o;
        }
        self.solver.adjoint(&self.sources, &residual)
    }

    /// Objective evaluated from an already-computed residual.
    fn objective_of_residual(&self, residual: &[f64]) -> f64 {
        0.5 * self.dt() * stable_norm_sq(residual)
    }
}

/// Reconstruction output with per-iteration diagnostics.
#[derive(Debug, Clone)]
pub struct InversionResult {
    pub f_hat: ScalarVolume,
    /// Objective value before each update, plus the final value: length
    /// `iterations + 1`.
    pub objective_history: Vec<f64>,
    /// Gradient norm (volume inner product) at the same points.
    pub gradient_norm_history: Vec<f64>,
    pub iterations: usize,
    pub converged_early: bool,
}

/// Options for [`invert`].
#[derive(Debug, Clone, Copy)]
pub struct InvertOptions {
    pub iterations: usize,
    /// Optional Tikhonov weight (damped least squares), default 0.
    pub tikhonov: f64,
    /// Clamp negative values of the final volume to zero.
    pub nonnegative: bool,
}

impl Default for InvertOptions {
    fn default() -> Self {
        InvertOptions {
            iterations: 100,
            tikhonov: 0.0,
            nonnegative: false,
        }
    }
}

/// CGLS on `min 1/2 dt ||A f - d||^2 + 1/2 mu h^3 ||f||^2`, starting from
/// `f0` (all zeros when `None`).
///
/// Stops after `iterations` rounds, or earlier when the gradient norm falls
/// below 1e-12 of its initial value. The returned objective history is
/// non-increasing.
pub fn invert(
    problem: &InversionProblem,
    opts: &InvertOptions,
    f0: Option<ScalarVolume>,
) -> Result<InversionResult> {
    if opts.iterations < 1 {
        return Err(Error::validation("iteration count must be >= 1"));
    }
    if opts.tikhonov < 0.0 {
        return Err(Error::validation("tikhonov weight must be >= 0"));
    }
    let mut f = match f0 {
        Some(v) => {
            if !v.domain.same_grid(&problem.domain) {
                return Err(Error::validation("initial guess grid differs from problem"));
            }
            v
        }
        None => ScalarVolume::zeros(problem.domain),
    };
    let dt = problem.dt();
    let h3 = problem.cell_volume();
    let mu = opts.tikhonov;

    // r = d - A f in trace space
    let predicted = problem.solver.forward_all(&f, &problem.sources)?;
    let mut r: Vec<f64> = problem
        .observed
        .samples
        .iter()
        .zip(&predicted.samples)
        .map(|(d, p)| d - p)
        .collect();

    // s = A* r - mu f : negative gradient in the volume inner product
    let wrap = |samples: Vec<f64>| TraceSet {
        n_sources: problem.observed.n_sources,
        n_receivers: problem.observed.n_receivers,
        n_steps: problem.observed.n_steps,
        sample_interval: problem.observed.sample_interval,
        samples,
    };
    let mut s = problem.solver.adjoint(&problem.sources, &wrap(r.clone()))?.values;
    if mu > 0.0 {
        for (sv, fv) in s.iter_mut().zip(&f.values) {
            *sv -= mu * fv;
        }
    }

    let mut objective_history = Vec::with_capacity(opts.iterations + 1);
    let mut gradient_norm_history = Vec::with_capacity(opts.iterations + 1);
    let reg_term = |f: &[f64]| 0.5 * mu * h3 * stable_norm_sq(f);
    objective_history.push(problem.objective_of_residual(&r) + reg_term(&f.values));
    let mut gamma = h3 * stable_norm_sq(&s);
    gradient_norm_history.push(gamma.sqrt());
    let gamma0 = gamma;

    let mut p = s.clone();
    let mut iterations = 0;
    let mut converged_early = false;

    for _ in 0..opts.iterations {
        if !(gamma > GRADIENT_STOP_RTOL * GRADIENT_STOP_RTOL * gamma0) || gamma == 0.0 {
            converged_early = true;
            break;
        }
        let pv = ScalarVolume::from_values(problem.domain, p.clone())?;
        let q = problem.solver.forward_all(&pv, &problem.sources)?;
        // step length in the weighted geometry
        let denom = dt * stable_norm_sq(&q.samples) + mu * h3 * stable_norm_sq(&p);
        if !(denom > 0.0) || !denom.is_finite() {
            converged_early = true;
            break;
        }
        let alpha = gamma / denom;
        for (fv, pv) in f.values.iter_mut().zip(&p) {
            *fv += alpha * pv;
        }
        for (rv, qv) in r.iter_mut().zip(&q.samples) {
            *rv -= alpha * qv;
        }
        s = problem.solver.adjoint(&problem.sources, &wrap(r.clone()))?.values;
        if mu > 0.0 {
            for (sv, fv) in s.iter_mut().zip(&f.values) {
                *sv -= mu * fv;
            }
        }
        let gamma_new = h3 * stable_norm_sq(&s);
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        xpby(&s, beta, &mut p);
        iterations += 1;
        let obj = problem.objective_of_residual(&r) + reg_term(&f.values);
        if !obj.is_finite() {
            return Err(Error::numeric(
                format!("invert iteration {iterations}"),
                "objective is not finite",
            ));
        }
        objective_history.push(obj);
        gradient_norm_history.push(gamma.sqrt());
    }

    if opts.nonnegative {
        for v in f.values.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    Ok(InversionResult {
        f_hat: f,
        objective_history,
        gradient_norm_history,
        iterations,
        converged_early,
    })
}

/// Write the per-iteration report: `iteration,objective,gradient_norm`.
pub fn write_report(result: &InversionResult, path: impl AsRef<std::path::Path>) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    (|| -> std::io::Result<()> {
        writeln!(w, "iteration,objective,gradient_norm")?;
        for (i, (obj, g)) in result
            .objective_history
            .iter()
            .zip(&result.gradient_norm_history)
            .enumerate()
        {
            writeln!(w, "{i},{obj:e},{g:e}")?;
        }
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}
