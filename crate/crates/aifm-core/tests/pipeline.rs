//! End-to-end pipeline behaviour: caching, imported velocity fields,
//! trace noise, and sweep bookkeeping. Everything runs at smoke scale.

use aifm_core::pipeline::{preset, run_pipeline, sweep, SweepPlan};
use aifm_core::scenario::ScenarioKind;
use aifm_core::volume::read_vector_volume;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

fn artifact_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                if rel != "manifest.json" {
                    out.insert(rel, std::fs::read(&path).unwrap());
                }
            }
        }
    }
    out
}

#[test]
fn rerun_in_same_directory_is_all_cache_hits_and_bytes_are_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = preset("smoke-desk").unwrap();
    let first = run_pipeline(&cfg, tmp.path()).unwrap();
    assert_eq!(
        first.executed,
        vec!["generate", "probe", "invert", "flow", "evaluate"]
    );
    let before = artifact_bytes(tmp.path());
    let second = run_pipeline(&cfg, tmp.path()).unwrap();
    assert!(second.executed.is_empty(), "expected pure cache hits");
    let after = artifact_bytes(tmp.path());
    assert_eq!(before, after);

    // touching a config knob of a late stage reruns only that stage chain
    let relaxed = cfg
        .with_overrides(&[("metrics.support_threshold".into(), "0.4".into())])
        .unwrap();
    let third = run_pipeline(&relaxed, tmp.path()).unwrap();
    assert_eq!(third.executed, vec!["evaluate"]);
}

#[test]
fn constant_desk_smoke_run_emits_all_artifacts() {
    // the constant-desk preset exercised end to end; a short iteration
    // budget keeps this a smoke run without changing any interface
    let tmp = tempfile::tempdir().unwrap();
    let cfg = preset("constant-desk")
        .unwrap()
        .with_overrides(&[
            ("inversion.iterations".into(), "6".into()),
            ("schedule.count".into(), "3".into()),
        ])
        .unwrap();
    let summary = run_pipeline(&cfg, tmp.path()).unwrap();
    assert_eq!(summary.executed.len(), 5);
    for rel in [
        "truth/particles_002.json",
        "truth/f_true_002.avol",
        "truth/flow_true.avec",
        "traces/snap_002.atrc",
        "traces/receivers.csv",
        "recon/f_hat_002.avol",
        "recon/invert_002.csv",
        "flow/pair_001.avec",
        "flow/flow_mean.avec",
        "flow/stats.csv",
        "flow/histograms.csv",
        "report/errors.json",
        "report/errors.csv",
    ] {
        assert!(tmp.path().join(rel).exists(), "missing {rel}");
    }
    assert!(summary.report.re1.is_some());

    // manifest completeness: every non-metadata file is listed with a hash
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("manifest.json")).unwrap())
            .unwrap();
    let mut listed = std::collections::BTreeSet::new();
    for (_, stage) in manifest["stages"].as_object().unwrap() {
        for artifact in stage["outputs"].as_array().unwrap() {
            let path = artifact["path"].as_str().unwrap();
            let hash = artifact["sha256"].as_str().unwrap();
            assert_eq!(hash.len(), 64, "{path} hash");
            assert!(tmp.path().join(path).exists(), "{path} listed but missing");
            listed.insert(path.to_string());
        }
    }
    for (rel, _) in artifact_bytes(tmp.path()) {
        if rel != "config.toml" {
            assert!(listed.contains(&rel), "{rel} on disk but not in manifest");
        }
    }
}

#[test]
fn imported_velocity_field_flows_through_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("field.csv");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&csv).unwrap());
        writeln!(w, "x1,x2,x3,v1,v2,v3").unwrap();
        let n = 6;
        let h = 1.0 / (n - 1) as f64;
        for i1 in 0..n {
            for i2 in 0..n {
                for i3 in 0..n {
                    writeln!(
                        w,
                        "{},{},{},0,1,0",
                        h * i1 as f64,
                        h * i2 as f64,
                        h * i3 as f64
                    )
                    .unwrap();
                }
            }
        }
    }
    let mut cfg = preset("smoke-desk").unwrap();
    cfg.scenario.kind = ScenarioKind::TJunctionImport { path: csv };
    let run_dir = tmp.path().join("run");
    let summary = run_pipeline(&cfg, &run_dir).unwrap();
    // the resampled truth is the constant field
    let v_true = read_vector_volume(run_dir.join("truth/flow_true.avec")).unwrap();
    for (a, expect) in [(0usize, 0.0), (1, 1.0), (2, 0.0)] {
        for &v in &v_true.components[a].values {
            assert!((v - expect).abs() < 1e-6, "component {a}: {v}");
        }
    }
    // a 1 m/s mean flow has an inflow face, so the transit band is excluded
    let transit = summary.report.transit_exclusion.expect("transit exclusion");
    assert_eq!(transit.axis, 1);
    assert!(!transit.at_max_face);
    assert!(summary.report.re2.is_some());
}

#[test]
fn trace_noise_is_seeded_and_optional() {
    let tmp = tempfile::tempdir().unwrap();
    let quiet = preset("smoke-desk").unwrap();
    let noisy = quiet
        .with_overrides(&[("inversion.noise_snr_db".into(), "20.0".into())])
        .unwrap();
    let d_quiet = tmp.path().join("quiet");
    let d_noisy1 = tmp.path().join("noisy1");
    let d_noisy2 = tmp.path().join("noisy2");
    run_pipeline(&quiet, &d_quiet).unwrap();
    run_pipeline(&noisy, &d_noisy1).unwrap();
    run_pipeline(&noisy, &d_noisy2).unwrap();
    let t_quiet = std::fs::read(d_quiet.join("traces/snap_000.atrc")).unwrap();
    let t_noisy1 = std::fs::read(d_noisy1.join("traces/snap_000.atrc")).unwrap();
    let t_noisy2 = std::fs::read(d_noisy2.join("traces/snap_000.atrc")).unwrap();
    assert_ne!(t_quiet, t_noisy1, "noise must perturb the traces");
    assert_eq!(t_noisy1, t_noisy2, "noise must be seeded");
}

#[test]
fn sweep_records_failures_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = preset("smoke-desk").unwrap();
    let plan = SweepPlan {
        // spatial order 5 is invalid and must fail validation
        axes: vec![(
            "solver.spatial_order".to_string(),
            vec!["4".to_string(), "5".to_string()],
        )],
        seeds: vec![11],
    };
    let outcome = sweep(&cfg, &plan, tmp.path()).unwrap();
    assert_eq!(outcome.rows.len(), 2);
    let ok = outcome.rows.iter().filter(|r| r.outcome.is_ok()).count();
    let failed = outcome.rows.iter().filter(|r| r.outcome.is_err()).count();
    assert_eq!((ok, failed), (1, 1));
    let ledger = std::fs::read_to_string(&outcome.ledger_csv).unwrap();
    assert_eq!(ledger.lines().count(), 3);
    assert!(ledger.contains(",failed,"), "{ledger}");
    let agg = std::fs::read_to_string(&outcome.aggregate_csv).unwrap();
    assert_eq!(agg.lines().count(), 3, "{agg}");
}

#[test]
fn empty_sweep_grid_is_an_empty_ledger() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = preset("smoke-desk").unwrap();
    let outcome = sweep(
        &cfg,
        &SweepPlan {
            axes: vec![],
            seeds: vec![],
        },
        tmp.path(),
    )
    .unwrap();
    assert!(outcome.rows.is_empty());
    let ledger = std::fs::read_to_string(&outcome.ledger_csv).unwrap();
    assert_eq!(ledger.lines().count(), 1, "{ledger}");
}
