//! Named experiment configurations: the reference studies at full scale
//! and `-desk` variants small enough for laptops and CI.
//!
//! Full-scale presets use the reference setup: a 1 m x 1 m x 1 m channel
//! section at 1 cm spacing (101^3 nodes), c = 1500 m/s, 20 kHz wavelets,
//! dt = 2.3 us, 100 reconstruction iterations, 10 probe snapshots. Desk
//! variants shrink the grid (<= 49^3), source count (<= 6 unless the study
//! varies it), receivers (<= 21^2 per face) and snapshot count (<= 5), and
//! pick the snapshot interval so a tracer moves about four voxels between
//! frames, which is where the flow estimator is most accurate.

use super::{
    ExperimentConfig, InversionConfig, MediumConfig, MetricsConfig, ReceiverConfig,
    ScenarioSection, ScheduleSection, SolverSection, SourceConfig, SCHEMA_VERSION,
};
use crate::acoustics::ReceiverLayout;
use crate::error::{Error, Result};
use crate::flow3d::FlowParams;
use crate::scenario::ScenarioKind;
use crate::volume::DomainSpec;
use std::f64::consts::PI;

const PRESET_NAMES: &[&str] = &[
    "constant",
    "constant-desk",
    "constant-desk-49",
    "taylor-green",
    "taylor-green-desk",
    "directions-10",
    "directions-20",
    "directions-10-desk",
    "directions-20-desk",
    "receivers-101",
    "receivers-51",
    "receivers-21",
    "receivers-101-desk",
    "receivers-51-desk",
    "receivers-21-desk",
    "layout-allaround",
    "layout-walls-surface",
    "layout-sidewalls",
    "layout-allaround-desk",
    "layout-walls-surface-desk",
    "layout-sidewalls-desk",
    "particles-10",
    "particles-50",
    "particles-200",
    "particles-10-desk",
    "particles-50-desk",
    "particles-200-desk",
    "tjunction-w0.5-theta60",
    "tjunction-w0.5-theta90",
    "tjunction-w0.5-theta120",
    "tjunction-w0.5-theta60-desk",
    "tjunction-w0.5-theta90-desk",
    "tjunction-w0.5-theta120-desk",
    "smoke-desk",
];

pub fn preset_names() -> &'static [&'static str] {
    PRESET_NAMES
}

fn base(domain: DomainSpec, sources: usize, layout: ReceiverLayout, resolution: usize) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        seed: 20240915,
        domain,
        medium: MediumConfig { sound_speed: 1500.0 },
        solver: SolverSection {
            dt: None,
            spatial_order: 4,
            cfl_safety: 0.6,
            record_every: 1,
        },
        source: SourceConfig {
            count: sources,
            central_frequency: 2e4,
        },
        receivers: ReceiverConfig {
            layout,
            resolution,
            inset: None,
        },
        scenario: ScenarioSection {
            kind: ScenarioKind::Constant {
                velocity: [0.0, 1.0, 0.0],
            },
            particle_count: 200,
            diameter_range: [0.06, 0.10],
            margin: None,
            smoothing: None,
        },
        schedule: ScheduleSection {
            count: 10,
            interval: None,
            probe_window: None,
        },
        inversion: InversionConfig {
            iterations: 100,
            tikhonov: 0.0,
            nonnegative: false,
            noise_snr_db: None,
        },
        flow: FlowParams::default(),
        metrics: MetricsConfig {
            support_threshold: 0.5,
            border_shell: None,
        },
        sponge: None,
    }
}

/// The reference unit cube at 1 cm spacing, paper time step.
fn paper_cube(sources: usize, layout: ReceiverLayout, resolution: usize) -> ExperimentConfig {
    let domain = DomainSpec::with_extent([1.0; 3], 0.01).expect("unit cube");
    let mut cfg = base(domain, sources, layout, resolution);
    cfg.solver.dt = Some(2.3e-6);
    cfg
}

/// Desk cube with `n^3` nodes over 1 m.
fn desk_cube(n: usize, sources: usize, layout: ReceiverLayout, resolution: usize) -> ExperimentConfig {
    let domain = DomainSpec::with_extent([1.0; 3], 1.0 / (n - 1) as f64).expect("desk cube");
    let mut cfg = base(domain, sources, layout, resolution);
    cfg.schedule.count = 5;
    // four voxels per frame at the 1 m/s reference speed
    cfg.schedule.interval = Some(4.0 * cfg.domain.spacing);
    cfg
}

fn scaled_particles(cfg: &mut ExperimentConfig, count: usize) {
    // counts are per unit volume; all preset boxes have volume <= 1 m^3
    let volume: f64 = cfg.domain.extent.iter().product();
    cfg.scenario.particle_count = ((count as f64) * volume).round().max(1.0) as usize;
}

fn tjunction(theta_deg: f64, desk: bool) -> ExperimentConfig {
    let width: f64 = 0.5;
    // measurement box is width x 1 m x 1 m along the branch
    let spacing = if desk { 1.0 / 40.0 } else { 0.01 };
    let domain = DomainSpec::with_extent([width, 1.0, 1.0], spacing).expect("junction box");
    let mut cfg = base(
        domain,
        if desk { 6 } else { 10 },
        ReceiverLayout::AllAround6,
        if desk { 21 } else { 101 },
    );
    // Desk runs scale the inlet to 2 m/s so the probe window fits the
    // snapshot interval at this box size; the full-scale preset keeps the
    // reference 20 m/s inlet.
    let inlet_speed = if desk { 2.0 } else { 20.0 };
    cfg.scenario.kind = ScenarioKind::TJunctionSurrogate {
        theta: theta_deg * PI / 180.0,
        width,
        distance: 1.0,
        inlet_speed,
    };
    // particle sizes must fit the 0.5 m axis
    cfg.scenario.diameter_range = [0.04, 0.07];
    scaled_particles(&mut cfg, 200);
    if desk {
        cfg.schedule.count = 5;
        // ~4 voxels per frame at the branch mean speed
        let opening = width * (theta_deg * PI / 180.0).sin();
        let mean = inlet_speed * 5.0 * (opening / (5.0 + opening)) / width;
        cfg.schedule.interval = Some(4.0 * spacing / mean);
    } else {
        cfg.solver.dt = Some(2.3e-6);
    }
    cfg
}

/// Look up a named preset; unknown names list the catalogue.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let cfg = match name {
        "constant" => paper_cube(10, ReceiverLayout::AllAround6, 101),
        // the smoke-scale pipeline fixture
        "constant-desk" => {
            let mut cfg = desk_cube(33, 4, ReceiverLayout::WallsAndSurface4, 21);
            cfg.scenario.particle_count = 60;
            cfg
        }
        // the full desk-scale flow benchmark
        "constant-desk-49" => desk_cube(49, 6, ReceiverLayout::AllAround6, 21),
        "taylor-green" => {
            let mut cfg = paper_cube(10, ReceiverLayout::AllAround6, 101);
            cfg.scenario.kind = ScenarioKind::TaylorGreen { amplitude: 3.0 };
            cfg
        }
        "taylor-green-desk" => {
            let mut cfg = desk_cube(49, 6, ReceiverLayout::AllAround6, 21);
            cfg.scenario.kind = ScenarioKind::TaylorGreen { amplitude: 3.0 };
            // four voxels per frame at the 3 m/s peak speed
            cfg.schedule.interval = Some(4.0 * cfg.domain.spacing / 3.0);
            cfg
        }
        "directions-10" => paper_cube(10, ReceiverLayout::AllAround6, 101),
        "directions-20" => paper_cube(20, ReceiverLayout::AllAround6, 101),
        // the direction study keeps its varying parameter at desk scale
        "directions-10-desk" => desk_cube(33, 10, ReceiverLayout::WallsAndSurface4, 21),
        "directions-20-desk" => desk_cube(33, 20, ReceiverLayout::WallsAndSurface4, 21),
        "receivers-101" => paper_cube(10, ReceiverLayout::WallsAndSurface4, 101),
        "receivers-51" => paper_cube(10, ReceiverLayout::WallsAndSurface4, 51),
        "receivers-21" => paper_cube(10, ReceiverLayout::WallsAndSurface4, 21),
        "receivers-101-desk" => desk_cube(33, 6, ReceiverLayout::WallsAndSurface4, 21),
        "receivers-51-desk" => desk_cube(33, 6, ReceiverLayout::WallsAndSurface4, 11),
        "receivers-21-desk" => desk_cube(33, 6, ReceiverLayout::WallsAndSurface4, 5),
        "layout-allaround" => paper_cube(10, ReceiverLayout::AllAround6, 101),
        "layout-walls-surface" => paper_cube(10, ReceiverLayout::WallsAndSurface4, 101),
        "layout-sidewalls" => paper_cube(10, ReceiverLayout::Sidewalls2, 101),
        "layout-allaround-desk" => desk_cube(33, 6, ReceiverLayout::AllAround6, 21),
        "layout-walls-surface-desk" => desk_cube(33, 6, ReceiverLayout::WallsAndSurface4, 21),
        "layout-sidewalls-desk" => desk_cube(33, 6, ReceiverLayout::Sidewalls2, 21),
        "particles-10" | "particles-50" | "particles-200" => {
            let count = name.rsplit('-').next().unwrap().parse::<usize>().unwrap();
            let mut cfg = paper_cube(10, ReceiverLayout::AllAround6, 101);
            scaled_particles(&mut cfg, count);
            cfg
        }
        "particles-10-desk" | "particles-50-desk" | "particles-200-desk" => {
            let count = name
                .trim_end_matches("-desk")
                .rsplit('-')
                .next()
                .unwrap()
                .parse::<usize>()
                .unwrap();
            let mut cfg = desk_cube(33, 6, ReceiverLayout::AllAround6, 21);
            scaled_particles(&mut cfg, count);
            cfg
        }
        "tjunction-w0.5-theta60" => tjunction(60.0, false),
        "tjunction-w0.5-theta90" => tjunction(90.0, false),
        "tjunction-w0.5-theta120" => tjunction(120.0, false),
        "tjunction-w0.5-theta60-desk" => tjunction(60.0, true),
        "tjunction-w0.5-theta90-desk" => tjunction(90.0, true),
        "tjunction-w0.5-theta120-desk" => tjunction(120.0, true),
        // tiny fixture for determinism checks and CLI smoke runs
        "smoke-desk" => {
            let mut cfg = desk_cube(17, 2, ReceiverLayout::Sidewalls2, 5);
            cfg.scenario.particle_count = 6;
            cfg.schedule.count = 3;
            cfg.inversion.iterations = 12;
            cfg
        }
        _ => {
            return Err(Error::validation(format!(
                "unknown preset {name:?}; available: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(cfg)
}
