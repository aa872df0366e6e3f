//! Staged experiment runner with content-addressed caching.
//!
//! Stages: generate -> probe -> invert -> flow -> evaluate. Each stage
//! hashes its own configuration slice together with the content hashes of
//! its upstream artifacts; a stage is skipped when the manifest already
//! records the same inputs hash and every output file still matches its
//! recorded hash. Artifacts are bit-reproducible for a fixed (config,
//! seed) at any thread count, so cache hits and reruns are
//! indistinguishable.

use super::ExperimentConfig;
use crate::acoustics::{TraceSet, WaveSolver};
use crate::error::{Error, Result};
use crate::flow3d::{displacement_to_velocity, estimate_flow, normalize_for_flow};
use crate::inverse::{invert, InversionProblem, InvertOptions};
use crate::metrics::{evaluate, ErrorReport, EvaluateInputs};
use crate::scenario::{
    advect, ingest_cfd_field, rasterize, seed_particles, velocity_volume, ScenarioKind,
};
use crate::volume::{
    export_receiver_csv, read_trace_set, read_volume, write_trace_set, write_vector_volume,
    write_volume, read_vector_volume, ScalarVolume, VectorVolume,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// RK4 sub-steps per snapshot interval during advection.
const ADVECT_SUBSTEPS: usize = 4;

const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    config_hash: String,
    versions: BTreeMap<String, String>,
    stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageRecord {
    inputs_hash: String,
    outputs: Vec<ArtifactRecord>,
    seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArtifactRecord {
    path: String,
    sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn json_of<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::validation(format!("hash serialise: {e}")))
}

fn load_manifest(dir: &Path) -> Manifest {
    let path = dir.join(MANIFEST_FILE);
    std::fs::read_to_string(&path)
        .ok()
        .and_then(|text| serde_json::from_str(&text).ok())
        .unwrap_or_default()
}

fn store_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::validation(format!("manifest serialise: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// True when the recorded stage matches `inputs_hash` and all outputs are
/// intact on disk.
fn stage_is_fresh(manifest: &Manifest, dir: &Path, stage: &str, inputs_hash: &str) -> bool {
    let Some(record) = manifest.stages.get(stage) else {
        return false;
    };
    if record.inputs_hash != inputs_hash {
        return false;
    }
    record.outputs.iter().all(|a| {
        let path = dir.join(&a.path);
        path.exists() && hash_file(&path).map(|h| h == a.sha256).unwrap_or(false)
    })
}

/// Hash of a stage's own upstream artifact hashes (the stage chain).
fn upstream_hash(manifest: &Manifest, stage: &str) -> String {
    manifest
        .stages
        .get(stage)
        .map(|r| {
            let concat: String = r.outputs.iter().map(|a| a.sha256.as_str()).collect();
            sha256_hex(concat.as_bytes())
        })
        .unwrap_or_default()
}

fn record_stage(
    manifest: &mut Manifest,
    dir: &Path,
    stage: &str,
    inputs_hash: String,
    outputs: Vec<PathBuf>,
    seconds: f64,
) -> Result<()> {
    let mut records = Vec::with_capacity(outputs.len());
    for path in outputs {
        let rel = path
            .strip_prefix(dir)
            .unwrap_or(&path)
            .to_string_lossy()
            .into_owned();
        records.push(ArtifactRecord {
            sha256: hash_file(&path)?,
            path: rel,
        });
    }
    manifest.stages.insert(
        stage.to_string(),
        StageRecord {
            inputs_hash,
            outputs: records,
            seconds,
        },
    );
    store_manifest(dir, manifest)
}

fn snapshot_name(prefix: &str, j: usize, ext: &str) -> String {
    format!("{prefix}_{j:03}.{ext}")
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Resolve, persist and hash the configuration for a run directory.
fn prepare(config: &ExperimentConfig, dir: &Path) -> Result<(ExperimentConfig, Manifest)> {
    let mut cfg = config.clone();
    cfg.resolve()?;
    ensure_dir(dir)?;
    let toml_text = cfg.to_toml()?;
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, &toml_text).map_err(|e| Error::io(&config_path, e))?;
    let mut manifest = load_manifest(dir);
    manifest.schema_version = super::SCHEMA_VERSION;
    manifest.config_hash = sha256_hex(toml_text.as_bytes());
    manifest
        .versions
        .insert("aifm-core".into(), env!("CARGO_PKG_VERSION").into());
    Ok((cfg, manifest))
}

/// Load the imported junction field when the scenario needs it.
fn load_import(cfg: &ExperimentConfig) -> Result<Option<VectorVolume>> {
    match &cfg.scenario.kind {
        ScenarioKind::TJunctionImport { path } => {
            Ok(Some(ingest_cfd_field(path, cfg.domain)?))
        }
        _ => Ok(None),
    }
}

/// Stage 1: seed and advect particles, rasterise per-snapshot truth
/// volumes, sample the true velocity field.
pub fn run_generate(config: &ExperimentConfig, dir: &Path) -> Result<bool> {
    let (cfg, mut manifest) = prepare(config, dir)?;
    let inputs = sha256_hex(
        json_of(&(
            "generate",
            &cfg.domain,
            &cfg.scenario,
            cfg.schedule.count,
            cfg.schedule.interval,
            cfg.seed,
        ))?
        .as_bytes(),
    );
    if stage_is_fresh(&manifest, dir, "generate", &inputs) {
        return Ok(false);
    }
    let started = std::time::Instant::now();
    let truth_dir = dir.join("truth");
    ensure_dir(&truth_dir)?;
    let spec = cfg.scenario_spec()?;
    let schedule = cfg.schedule()?;
    let imported = load_import(&cfg)?;
    let smoothing = cfg.scenario.smoothing.unwrap_or(cfg.domain.spacing);

    let mut outputs = Vec::new();
    let mut particles = seed_particles(&spec, &cfg.domain)?;
    for j in 0..schedule.count {
        if j > 0 {
            let sub_dt = schedule.interval / ADVECT_SUBSTEPS as f64;
            for sub in 0..ADVECT_SUBSTEPS {
                let step_index = ((j - 1) * ADVECT_SUBSTEPS + sub) as u64;
                particles = advect(
                    &particles,
                    &spec,
                    imported.as_ref(),
                    &cfg.domain,
                    sub_dt,
                    step_index,
                )?;
            }
        }
        let pj = truth_dir.join(snapshot_name("particles", j, "json"));
        let text = serde_json::to_string_pretty(&particles)
            .map_err(|e| Error::validation(format!("particle serialise: {e}")))?;
        std::fs::write(&pj, text).map_err(|e| Error::io(&pj, e))?;
        outputs.push(pj);

        let f_true = rasterize(&particles, cfg.domain, smoothing);
        let fj = truth_dir.join(snapshot_name("f_true", j, "avol"));
        write_volume(&f_true, &fj)?;
        outputs.push(fj);
    }
    let v_true = velocity_volume(&cfg.scenario.kind, imported.as_ref(), cfg.domain, 0.0)?;
    let vt = truth_dir.join("flow_true.avec");
    write_vector_volume(&v_true, &vt)?;
    outputs.push(vt);

    record_stage(
        &mut manifest,
        dir,
        "generate",
        inputs,
        outputs,
        started.elapsed().as_secs_f64(),
    )
    .map_err(|e| e.in_stage("generate"))?;
    Ok(true)
}

fn build_solver(cfg: &ExperimentConfig) -> Result<WaveSolver> {
    let c = ScalarVolume::from_fn(cfg.domain, |_| cfg.medium.sound_speed);
    WaveSolver::new(
        cfg.domain,
        &c,
        cfg.solver_config()?,
        &cfg.receiver_array()?,
        cfg.schedule()?.probe_window,
        cfg.sponge,
    )
}

/// Stage 2: probe every snapshot with all sources and record traces.
pub fn run_probe(config: &ExperimentConfig, dir: &Path) -> Result<bool> {
    let (cfg, mut manifest) = prepare(config, dir)?;
    let gen_hash = upstream_hash(&manifest, "generate");
    if gen_hash.is_empty() {
        return Err(Error::validation(
            "probe requires generate outputs; run `generate` (or `run`) first",
        )
        .in_stage("probe"));
    }
    let inputs = sha256_hex(
        json_of(&(
            "probe",
            &gen_hash,
            &cfg.medium,
            &cfg.solver,
            &cfg.source,
            &cfg.receivers,
            cfg.schedule.probe_window,
            &cfg.sponge,
            cfg.inversion.noise_snr_db,
            cfg.seed,
        ))?
        .as_bytes(),
    );
    if stage_is_fresh(&manifest, dir, "probe", &inputs) {
        return Ok(false);
    }
    let started = std::time::Instant::now();
    let traces_dir = dir.join("traces");
    ensure_dir(&traces_dir)?;
    let solver = build_solver(&cfg).map_err(|e| e.in_stage("probe"))?;
    let sources = cfg.source_set()?;
    let receivers = cfg.receiver_array()?;
    let schedule = cfg.schedule()?;

    let mut outputs = Vec::new();
    let rc = traces_dir.join("receivers.csv");
    export_receiver_csv(&receivers.positions, &rc)?;
    outputs.push(rc);

    for j in 0..schedule.count {
        let f_true = read_volume(dir.join("truth").join(snapshot_name("f_true", j, "avol")))
            .map_err(|e| e.in_stage("probe"))?;
        let mut traces = solver
            .forward_all(&f_true, &sources)
            .map_err(|e| e.in_stage("probe"))?;
        if let Some(snr_db) = cfg.inversion.noise_snr_db {
            add_trace_noise(&mut traces, snr_db, cfg.seed, j as u64);
        }
        let tj = traces_dir.join(snapshot_name("snap", j, "atrc"));
        write_trace_set(&traces, &tj)?;
        outputs.push(tj);
    }
    record_stage(
        &mut manifest,
        dir,
        "probe",
        inputs,
        outputs,
        started.elapsed().as_secs_f64(),
    )
    .map_err(|e| e.in_stage("probe"))?;
    Ok(true)
}

/// Additive Gaussian noise at a fixed signal-to-noise ratio (dB), seeded
/// per snapshot.
fn add_trace_noise(traces: &mut TraceSet, snr_db: f64, seed: u64, snapshot: u64) {
    let n = traces.samples.len() as f64;
    let rms = (crate::util::stable_norm_sq(&traces.samples) / n).sqrt();
    if rms == 0.0 {
        return;
    }
    let sigma = rms / 10f64.powf(snr_db / 20.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA11Fu64.wrapping_mul(snapshot + 1));
    for v in traces.samples.iter_mut() {
        // Box-Muller from two uniform draws
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        *v += sigma * z;
    }
}

/// Stage 3: reconstruct the particle volume of every snapshot.
pub fn run_invert(config: &ExperimentConfig, dir: &Path) -> Result<bool> {
    let (cfg, mut manifest) = prepare(config, dir)?;
    let probe_hash = upstream_hash(&manifest, "probe");
    if probe_hash.is_empty() {
        return Err(
            Error::validation("invert requires probe outputs; run `probe` first")
                .in_stage("invert"),
        );
    }
    let inputs = sha256_hex(
        json_of(&(
            "invert",
            &probe_hash,
            cfg.inversion.iterations,
            cfg.inversion.tikhonov,
            cfg.inversion.nonnegative,
        ))?
        .as_bytes(),
    );
    if stage_is_fresh(&manifest, dir, "invert", &inputs) {
        return Ok(false);
    }
    let started = std::time::Instant::now();
    let recon_dir = dir.join("recon");
    ensure_dir(&recon_dir)?;
    let schedule = cfg.schedule()?;
    let sources = cfg.source_set()?;
    let receivers = cfg.receiver_array()?;
    let c = ScalarVolume::from_fn(cfg.domain, |_| cfg.medium.sound_speed);
    let opts = InvertOptions {
        iterations: cfg.inversion.iterations,
        tikhonov: cfg.inversion.tikhonov,
        nonnegative: cfg.inversion.nonnegative,
    };

    let mut outputs = Vec::new();
    for j in 0..schedule.count {
        let observed = read_trace_set(dir.join("traces").join(snapshot_name("snap", j, "atrc")))
            .map_err(|e| e.in_stage("invert"))?;
        let problem = InversionProblem::new(
            cfg.domain,
            &c,
            sources.clone(),
            &receivers,
            observed,
            cfg.solver_config()?,
            schedule.probe_window,
            cfg.sponge,
        )
        .map_err(|e| e.in_stage("invert"))?;
        let result = invert(&problem, &opts, None).map_err(|e| e.in_stage("invert"))?;
        let fj = recon_dir.join(snapshot_name("f_hat", j, "avol"));
        write_volume(&result.f_hat, &fj)?;
        outputs.push(fj);
        let rj = recon_dir.join(snapshot_name("invert", j, "csv"));
        crate::inverse::write_report(&result, &rj)?;
        outputs.push(rj);
    }
    record_stage(
        &mut manifest,
        dir,
        "invert",
        inputs,
        outputs,
        started.elapsed().as_secs_f64(),
    )
    .map_err(|e| e.in_stage("invert"))?;
    Ok(true)
}

/// Stage 4: optical flow between consecutive reconstructions, averaged
/// over all pairs.
pub fn run_flow(config: &ExperimentConfig, dir: &Path) -> Result<bool> {
    let (cfg, mut manifest) = prepare(config, dir)?;
    let invert_hash = upstream_hash(&manifest, "invert");
    if invert_hash.is_empty() {
        return Err(
            Error::validation("flow requires invert outputs; run `invert` first")
                .in_stage("flow"),
        );
    }
    let inputs = sha256_hex(
        json_of(&(
            "flow",
            &invert_hash,
            &cfg.flow,
            cfg.schedule.interval,
            cfg.domain.spacing,
        ))?
        .as_bytes(),
    );
    if stage_is_fresh(&manifest, dir, "flow", &inputs) {
        return Ok(false);
    }
    let started = std::time::Instant::now();
    let flow_dir = dir.join("flow");
    ensure_dir(&flow_dir)?;
    let schedule = cfg.schedule()?;
    let recon = |j: usize| -> Result<ScalarVolume> {
        read_volume(dir.join("recon").join(snapshot_name("f_hat", j, "avol")))
    };

    let mut outputs = Vec::new();
    let mut mean = VectorVolume::zeros(cfg.domain);
    let mut stats: Vec<(usize, [f64; 3], usize)> = Vec::new();
    let pair_count = schedule.count - 1;
    for j in 0..pair_count {
        let prev = normalize_for_flow(&recon(j).map_err(|e| e.in_stage("flow"))?);
        let next = normalize_for_flow(&recon(j + 1).map_err(|e| e.in_stage("flow"))?);
        let est = estimate_flow(&prev, &next, &cfg.flow).map_err(|e| e.in_stage("flow"))?;
        let velocity = displacement_to_velocity(
            &est.displacement,
            cfg.domain.spacing,
            schedule.interval,
        )?;
        let mut mean_v = [0.0; 3];
        for a in 0..3 {
            for (m, v) in mean.components[a]
                .values
                .iter_mut()
                .zip(&velocity.components[a].values)
            {
                *m += v / pair_count as f64;
            }
            mean_v[a] = crate::util::stable_sum(&velocity.components[a].values)
                / velocity.components[a].values.len() as f64;
        }
        stats.push((j, mean_v, est.singular_voxels));
        let pj = flow_dir.join(snapshot_name("pair", j, "avec"));
        write_vector_volume(&velocity, &pj)?;
        outputs.push(pj);
    }
    let mj = flow_dir.join("flow_mean.avec");
    write_vector_volume(&mean, &mj)?;
    outputs.push(mj);

    let sj = flow_dir.join("stats.csv");
    {
        use std::io::Write;
        let file = std::fs::File::create(&sj).map_err(|e| Error::io(&sj, e))?;
        let mut w = std::io::BufWriter::new(file);
        (|| -> std::io::Result<()> {
            writeln!(w, "pair,mean_v1,mean_v2,mean_v3,singular_voxels")?;
            for (j, m, s) in &stats {
                writeln!(w, "{j},{},{},{},{s}", m[0], m[1], m[2])?;
            }
            w.flush()
        })()
        .map_err(|e| Error::io(&sj, e))?;
    }
    outputs.push(sj);

    let hj = flow_dir.join("histograms.csv");
    write_component_histograms(&mean, &hj)?;
    outputs.push(hj);

    record_stage(
        &mut manifest,
        dir,
        "flow",
        inputs,
        outputs,
        started.elapsed().as_secs_f64(),
    )
    .map_err(|e| e.in_stage("flow"))?;
    Ok(true)
}

/// Stage 5: the error report against the ground truth.
pub fn run_evaluate(config: &ExperimentConfig, dir: &Path) -> Result<bool> {
    let (cfg, mut manifest) = prepare(config, dir)?;
    let flow_hash = upstream_hash(&manifest, "flow");
    let gen_hash = upstream_hash(&manifest, "generate");
    if flow_hash.is_empty() || gen_hash.is_empty() {
        return Err(
            Error::validation("evaluate requires generate and flow outputs")
                .in_stage("evaluate"),
        );
    }
    let inputs = sha256_hex(
        json_of(&("evaluate", &flow_hash, &gen_hash, &cfg.metrics))?.as_bytes(),
    );
    if stage_is_fresh(&manifest, dir, "evaluate", &inputs) {
        return Ok(false);
    }
    let started = std::time::Instant::now();
    let report_dir = dir.join("report");
    ensure_dir(&report_dir)?;
    let schedule = cfg.schedule()?;

    let v_rec = read_vector_volume(dir.join("flow").join("flow_mean.avec"))
        .map_err(|e| e.in_stage("evaluate"))?;
    let v_true = read_vector_volume(dir.join("truth").join("flow_true.avec"))
        .map_err(|e| e.in_stage("evaluate"))?;
    let mut per_pair = Vec::new();
    for j in 0..schedule.count - 1 {
        per_pair.push(
            read_vector_volume(dir.join("flow").join(snapshot_name("pair", j, "avec")))
                .map_err(|e| e.in_stage("evaluate"))?,
        );
    }
    // particle truth: pointwise max over the snapshots
    let mut particle_truth = ScalarVolume::zeros(cfg.domain);
    for j in 0..schedule.count {
        let f = read_volume(dir.join("truth").join(snapshot_name("f_true", j, "avol")))
            .map_err(|e| e.in_stage("evaluate"))?;
        for (m, v) in particle_truth.values.iter_mut().zip(&f.values) {
            *m = m.max(*v);
        }
    }
    let transit = crate::metrics::TransitExclusion::from_mean_flow(
        &v_true,
        schedule.interval,
        cfg.scenario.diameter_range[1],
    );
    let report = evaluate(&EvaluateInputs {
        v_rec: &v_rec,
        v_true: &v_true,
        per_pair: &per_pair,
        particle_truth: &particle_truth,
        support_threshold: cfg.metrics.support_threshold,
        border_shell: cfg.metrics.border_shell.unwrap_or(cfg.flow.window_radius),
        transit,
    })
    .map_err(|e| e.in_stage("evaluate"))?;

    let ej = report_dir.join("errors.json");
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::validation(format!("report serialise: {e}")))?;
    std::fs::write(&ej, text).map_err(|e| Error::io(&ej, e))?;

    let ec = report_dir.join("errors.csv");
    {
        use std::io::Write;
        let file = std::fs::File::create(&ec).map_err(|e| Error::io(&ec, e))?;
        let mut w = std::io::BufWriter::new(file);
        (|| -> std::io::Result<()> {
            writeln!(w, "config_hash,seed,re1,re2,re3,re4")?;
            writeln!(
                w,
                "{},{},{},{},{},{}",
                manifest.config_hash,
                cfg.seed,
                csv_opt(report.re1),
                csv_opt(report.re2),
                csv_opt(report.re3),
                csv_opt(report.re4),
            )?;
            w.flush()
        })()
        .map_err(|e| Error::io(&ec, e))?;
    }

    record_stage(
        &mut manifest,
        dir,
        "evaluate",
        inputs,
        vec![ej, ec],
        started.elapsed().as_secs_f64(),
    )
    .map_err(|e| e.in_stage("evaluate"))?;
    Ok(true)
}

pub(crate) fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_else(|| "undefined".into())
}

/// 32-bin histogram of each velocity component of the averaged flow.
fn write_component_histograms(field: &VectorVolume, path: &Path) -> Result<()> {
    use std::io::Write;
    const BINS: usize = 32;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    (|| -> std::io::Result<()> {
        writeln!(w, "component,bin,lo,hi,count")?;
        for (a, comp) in field.components.iter().enumerate() {
            let lo = comp.values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = comp.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let width = ((hi - lo) / BINS as f64).max(f64::MIN_POSITIVE);
            let mut counts = [0usize; BINS];
            for &v in &comp.values {
                let bin = (((v - lo) / width) as usize).min(BINS - 1);
                counts[bin] += 1;
            }
            for (b, count) in counts.iter().enumerate() {
                writeln!(
                    w,
                    "v{},{},{},{},{}",
                    a + 1,
                    b,
                    lo + b as f64 * width,
                    lo + (b + 1) as f64 * width,
                    count
                )?;
            }
        }
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

/// Outcome of a full pipeline run.
#[derive(Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub report: ErrorReport,
    /// Stages that actually executed (the rest were cache hits).
    pub executed: Vec<&'static str>,
}

/// Run every stage in order with caching.
pub fn run_pipeline(config: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    let mut executed = Vec::new();
    if run_generate(config, dir)? {
        executed.push("generate");
    }
    if run_probe(config, dir)? {
        executed.push("probe");
    }
    if run_invert(config, dir)? {
        executed.push("invert");
    }
    if run_flow(config, dir)? {
        executed.push("flow");
    }
    if run_evaluate(config, dir)? {
        executed.push("evaluate");
    }
    let text = std::fs::read_to_string(dir.join("report").join("errors.json"))
        .map_err(|e| Error::io(dir.join("report").join("errors.json"), e))?;
    let report: ErrorReport = serde_json::from_str(&text)
        .map_err(|e| Error::validation(format!("report parse: {e}")))?;
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        report,
        executed,
    })
}
