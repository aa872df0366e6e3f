//! Parameter sweeps: the cartesian product of dotted-path override axes,
//! optionally repeated over seeds, with per-run rows and per-combination
//! aggregates written as plot-ready CSV.

use super::run::{csv_opt, run_pipeline};
use super::ExperimentConfig;
use crate::error::{Error, Result};
use std::io::Write;
use std::path::{Path, PathBuf};

/// One sweep axis: a dotted config path and the values it takes.
#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub axes: Vec<(String, Vec<String>)>,
    pub seeds: Vec<u64>,
}

/// One row of the sweep ledger.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub combo: Vec<(String, String)>,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub outcome: std::result::Result<[Option<f64>; 4], String>,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub ledger_csv: PathBuf,
    pub aggregate_csv: PathBuf,
}

fn cartesian(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (path, values) in axes {
        let mut next = Vec::with_capacity(combos.len() * values.len());
        for combo in &combos {
            for v in values {
                let mut c = combo.clone();
                c.push((path.clone(), v.clone()));
                next.push(c);
            }
        }
        combos = next;
    }
    if axes.is_empty() {
        Vec::new()
    } else {
        combos
    }
}

/// Run the full grid; individual failures are recorded per row and do not
/// stop the sweep.
pub fn sweep(base: &ExperimentConfig, plan: &SweepPlan, out_dir: &Path) -> Result<SweepOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let combos = cartesian(&plan.axes);
    let seeds = if plan.seeds.is_empty() {
        vec![base.seed]
    } else {
        plan.seeds.clone()
    };
    let mut rows = Vec::new();
    for (ci, combo) in combos.iter().enumerate() {
        for &seed in &seeds {
            let run_dir = out_dir.join(format!("combo{ci:03}_seed{seed}"));
            let outcome = (|| -> Result<[Option<f64>; 4]> {
                let mut overrides = combo.clone();
                overrides.push(("seed".into(), seed.to_string()));
                let cfg = base.with_overrides(&overrides)?;
                let summary = run_pipeline(&cfg, &run_dir)?;
                Ok([
                    summary.report.re1,
                    summary.report.re2,
                    summary.report.re3,
                    summary.report.re4,
                ])
            })()
            .map_err(|e| e.to_string());
            rows.push(SweepRow {
                combo: combo.clone(),
                seed,
                run_dir,
                outcome,
            });
        }
    }

    let ledger_csv = out_dir.join("sweep_results.csv");
    {
        let file = std::fs::File::create(&ledger_csv).map_err(|e| Error::io(&ledger_csv, e))?;
        let mut w = std::io::BufWriter::new(file);
        (|| -> std::io::Result<()> {
            writeln!(w, "combo,seed,status,re1,re2,re3,re4,run_dir")?;
            for row in &rows {
                let combo = combo_label(&row.combo);
                match &row.outcome {
                    Ok(re) => writeln!(
                        w,
                        "{},{},ok,{},{},{},{},{}",
                        combo,
                        row.seed,
                        csv_opt(re[0]),
                        csv_opt(re[1]),
                        csv_opt(re[2]),
                        csv_opt(re[3]),
                        row.run_dir.display()
                    )?,
                    Err(msg) => writeln!(
                        w,
                        "{},{},failed,,,,,{}",
                        combo,
                        row.seed,
                        msg.replace(',', ";")
                    )?,
                }
            }
            w.flush()
        })()
        .map_err(|e| Error::io(&ledger_csv, e))?;
    }

    let aggregate_csv = out_dir.join("sweep_aggregates.csv");
    {
        let file =
            std::fs::File::create(&aggregate_csv).map_err(|e| Error::io(&aggregate_csv, e))?;
        let mut w = std::io::BufWriter::new(file);
        (|| -> std::io::Result<()> {
            writeln!(
                w,
                "combo,runs,re1_mean,re1_std,re2_mean,re2_std,re3_mean,re3_std,re4_mean,re4_std"
            )?;
            for combo in &combos {
                let label = combo_label(combo);
                let members: Vec<&SweepRow> =
                    rows.iter().filter(|r| &r.combo == combo).collect();
                let mut cols = String::new();
                for k in 0..4 {
                    let vals: Vec<f64> = members
                        .iter()
                        .filter_map(|r| r.outcome.as_ref().ok().and_then(|re| re[k]))
                        .collect();
                    let (mean, std) = mean_std(&vals);
                    cols.push_str(&format!(
                        ",{},{}",
                        mean.map(|v| v.to_string()).unwrap_or_default(),
                        std.map(|v| v.to_string()).unwrap_or_default()
                    ));
                }
                writeln!(w, "{label},{}{cols}", members.len())?;
            }
            w.flush()
        })()
        .map_err(|e| Error::io(&aggregate_csv, e))?;
    }

    Ok(SweepOutcome {
        rows,
        ledger_csv,
        aggregate_csv,
    })
}

fn combo_label(combo: &[(String, String)]) -> String {
    if combo.is_empty() {
        return "base".into();
    }
    combo
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn mean_std(vals: &[f64]) -> (Option<f64>, Option<f64>) {
    if vals.is_empty() {
        return (None, None);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (Some(mean), Some(0.0));
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}
