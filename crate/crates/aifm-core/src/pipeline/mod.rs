//! Experiment configuration, reproduction presets, the cached stage
//! runner, and parameter sweeps.

mod presets;
mod run;
mod sweep;

pub use presets::{preset, preset_names};
pub use run::{
    run_evaluate, run_flow, run_generate, run_invert, run_pipeline, run_probe, RunSummary,
};
pub use sweep::{sweep, SweepOutcome, SweepPlan};

use crate::acoustics::{ReceiverArray, ReceiverLayout, SolverConfig, SourceSet, SpongeConfig};
use crate::error::{Error, Result};
use crate::flow3d::FlowParams;
use crate::scenario::{ScenarioKind, ScenarioSpec};
use crate::volume::{DomainSpec, SnapshotSchedule};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Full experiment description. Optional fields are filled by
/// [`ExperimentConfig::resolve`] so that the config written into a run
/// directory is explicit and reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub domain: DomainSpec,
    pub medium: MediumConfig,
    pub solver: SolverSection,
    pub source: SourceConfig,
    pub receivers: ReceiverConfig,
    pub scenario: ScenarioSection,
    pub schedule: ScheduleSection,
    pub inversion: InversionConfig,
    pub flow: FlowParams,
    pub metrics: MetricsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sponge: Option<SpongeConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MediumConfig {
    /// Constant sound speed, m/s.
    pub sound_speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSection {
    /// Time step, seconds; derived from the CFL bound when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub spatial_order: usize,
    pub cfl_safety: f64,
    /// Record receiver traces every k-th solver step.
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

fn default_record_every() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    /// Number of emission directions (Fibonacci lattice).
    pub count: usize,
    /// Ricker central frequency, Hz.
    pub central_frequency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReceiverConfig {
    pub layout: ReceiverLayout,
    pub resolution: usize,
    /// Collection-surface offset from the boundary, metres; defaults to
    /// two grid spacings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inset: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSection {
    #[serde(flatten)]
    pub kind: ScenarioKind,
    pub particle_count: usize,
    pub diameter_range: [f64; 2],
    /// Margin between sphere surfaces and the boundary; defaults to the
    /// receiver inset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    /// Rasterisation smoothing, metres; defaults to one grid spacing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothing: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSection {
    pub count: usize,
    /// Seconds between snapshots; when absent, 1 s for flows slower than
    /// 10 m/s and 0.5 s otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<f64>,
    /// Probe duration, seconds; when absent, two domain traversals plus
    /// the wavelet duration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_window: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub iterations: usize,
    #[serde(default)]
    pub tikhonov: f64,
    #[serde(default)]
    pub nonnegative: bool,
    /// Additive Gaussian trace noise as a signal-to-noise ratio in dB;
    /// absent means noiseless.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_snr_db: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    /// Particle-support threshold as a fraction of the truth maximum.
    pub support_threshold: f64,
    /// Border shell excluded from metrics, voxels; defaults to the flow
    /// window radius.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub border_shell: Option<usize>,
}

impl ExperimentConfig {
    /// Fill derived defaults (dt, inset, margins, windows, intervals) so
    /// every later consumer sees concrete values.
    pub fn resolve(&mut self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::validation(format!(
                "config schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.domain.validate()?;
        let h = self.domain.spacing;
        let c = self.medium.sound_speed;
        if !(c > 0.0) {
            return Err(Error::validation("sound speed must be > 0"));
        }
        if self.solver.dt.is_none() {
            self.solver.dt =
                Some(self.solver.cfl_safety * SolverConfig::cfl_bound(h, c));
        }
        if self.receivers.inset.is_none() {
            self.receivers.inset = Some(2.0 * h);
        }
        if self.scenario.margin.is_none() {
            self.scenario.margin = self.receivers.inset;
        }
        if self.scenario.smoothing.is_none() {
            self.scenario.smoothing = Some(h);
        }
        if self.schedule.probe_window.is_none() {
            let diag = (self.domain.extent[0].powi(2)
                + self.domain.extent[1].powi(2)
                + self.domain.extent[2].powi(2))
            .sqrt();
            self.schedule.probe_window = Some(
                2.0 * diag / c + 6.0 / (std::f64::consts::PI * self.source.central_frequency),
            );
        }
        if self.schedule.interval.is_none() {
            let speed = self.scenario_peak_speed()?;
            self.schedule.interval = Some(if speed < 10.0 { 1.0 } else { 0.5 });
        }
        if self.metrics.border_shell.is_none() {
            self.metrics.border_shell = Some(self.flow.window_radius);
        }
        self.validate()
    }

    /// Rough upper bound of the scenario speed, for the interval rule.
    fn scenario_peak_speed(&self) -> Result<f64> {
        Ok(match &self.scenario.kind {
            ScenarioKind::Constant { velocity } => {
                (velocity[0].powi(2) + velocity[1].powi(2) + velocity[2].powi(2)).sqrt()
            }
            ScenarioKind::TaylorGreen { amplitude } => amplitude.abs() * 2.0_f64.sqrt(),
            ScenarioKind::TJunctionSurrogate {
                theta,
                width,
                distance: _,
                inlet_speed,
            } => {
                let opening = width * theta.sin();
                let mean = inlet_speed * 5.0 * (opening / (5.0 + opening)) / width;
                mean * 2.0
            }
            // imported fields are only known at run time; use the paper's
            // slow-flow default
            ScenarioKind::TJunctionImport { .. } => 1.0,
        })
    }

    /// Cross-field consistency checks; every stage assumes these hold.
    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        let h = self.domain.spacing;
        let c = self.medium.sound_speed;
        self.solver_config()?.validate(h, c)?;
        if self.source.count < 1 {
            return Err(Error::validation("source count must be >= 1"));
        }
        if !(self.source.central_frequency > 0.0) {
            return Err(Error::validation("central frequency must be > 0"));
        }
        let inset = self.receivers.inset.unwrap_or(2.0 * h);
        if self.receivers.layout != ReceiverLayout::Explicit {
            // constructs and validates positions
            ReceiverArray::generate(
                self.receivers.layout,
                self.receivers.resolution,
                inset,
                &self.domain,
            )?;
        }
        self.scenario_spec()?.validate()?;
        // particle placement must be feasible
        let margin = self.scenario.margin.unwrap_or(inset);
        let max_radius = self.scenario.diameter_range[1] / 2.0;
        for (axis, &e) in self.domain.extent.iter().enumerate() {
            if 2.0 * (margin + max_radius) >= e {
                return Err(Error::validation(format!(
                    "particles of radius {max_radius} with margin {margin} cannot fit \
                     extent[{axis}] = {e}"
                )));
            }
        }
        self.schedule()?.validate()?;
        if self.inversion.iterations < 1 {
            return Err(Error::validation("inversion iterations must be >= 1"));
        }
        if self.inversion.tikhonov < 0.0 {
            return Err(Error::validation("tikhonov weight must be >= 0"));
        }
        self.flow.validate()?;
        let dims = self.domain.dims();
        let min_dim = self.flow.min_dim();
        if dims.iter().any(|&n| n < min_dim) {
            return Err(Error::validation(format!(
                "grid {dims:?} too small for the flow expansion (needs {min_dim} per axis)"
            )));
        }
        if !(0.0..1.0).contains(&self.metrics.support_threshold) {
            return Err(Error::validation("support threshold must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn solver_config(&self) -> Result<SolverConfig> {
        let dt = self.solver.dt.ok_or_else(|| {
            Error::validation("solver.dt unresolved; call resolve() first")
        })?;
        Ok(SolverConfig {
            dt,
            spatial_order: self.solver.spatial_order,
            cfl_safety: self.solver.cfl_safety,
            record_every: self.solver.record_every,
        })
    }

    pub fn source_set(&self) -> Result<SourceSet> {
        SourceSet::fibonacci(
            self.source.count,
            self.source.central_frequency,
            self.medium.sound_speed,
        )
    }

    pub fn receiver_array(&self) -> Result<ReceiverArray> {
        let inset = self
            .receivers
            .inset
            .ok_or_else(|| Error::validation("receivers.inset unresolved"))?;
        ReceiverArray::generate(
            self.receivers.layout,
            self.receivers.resolution,
            inset,
            &self.domain,
        )
    }

    pub fn scenario_spec(&self) -> Result<ScenarioSpec> {
        Ok(ScenarioSpec {
            kind: self.scenario.kind.clone(),
            particle_count: self.scenario.particle_count,
            diameter_range: self.scenario.diameter_range,
            margin: self
                .scenario
                .margin
                .or(self.receivers.inset)
                .unwrap_or(2.0 * self.domain.spacing),
            seed: self.seed,
        })
    }

    pub fn schedule(&self) -> Result<SnapshotSchedule> {
        Ok(SnapshotSchedule {
            count: self.schedule.count,
            interval: self
                .schedule
                .interval
                .ok_or_else(|| Error::validation("schedule.interval unresolved"))?,
            probe_window: self
                .schedule
                .probe_window
                .ok_or_else(|| Error::validation("schedule.probe_window unresolved"))?,
        })
    }

    /// Parse from TOML text.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::validation(format!("config parse: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::validation(format!("config serialise: {e}")))
    }

    /// Apply a `dotted.path=value` override onto the TOML representation
    /// and re-parse. Values parse as TOML (numbers, booleans, arrays,
    /// strings).
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root: toml::Value = toml::Value::try_from(self)
            .map_err(|e| Error::validation(format!("config to toml: {e}")))?;
        for (path, raw) in overrides {
            let value: toml::Value = raw
                .parse::<toml::Value>()
                .or_else(|_| format!("x = {raw}").parse::<toml::Value>().map(|t| {
                    t.get("x").cloned().unwrap_or(toml::Value::String(raw.clone()))
                }))
                .unwrap_or(toml::Value::String(raw.clone()));
            set_path(&mut root, path, value)?;
        }
        let text = toml::to_string(&root)
            .map_err(|e| Error::validation(format!("override serialise: {e}")))?;
        Self::from_toml(&text)
    }
}

/// Insert `value` at a dotted path, creating intermediate tables.
fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::validation(format!("bad override path {path:?}")));
    }
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::validation(format!("{path:?}: `{part}` is not a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    unreachable!()
}
