//! Import of externally computed velocity fields.
//!
//! Two formats are accepted: the native vector-volume container, and CSV
//! with a mandatory `x1,x2,x3,v1,v2,v3` header where the rows enumerate a
//! full structured grid (any row order, unique monotone coordinates per
//! axis). The field is resampled onto the target grid by trilinear
//! interpolation, which requires the source grid to cover the target
//! domain.

use crate::error::{Error, Result};
use crate::volume::{read_vector_volume, DomainSpec, VectorVolume};
use std::io::{BufRead, Read};
use std::path::Path;

/// Load a velocity field and resample it onto `target`.
pub fn ingest_cfd_field(path: impl AsRef<Path>, target: DomainSpec) -> Result<VectorVolume> {
    let path = path.as_ref();
    let mut head = [0u8; 8];
    {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let n = f.read(&mut head).map_err(|e| Error::io(path, e))?;
        if n < 8 {
            return Err(Error::Ingestion(format!(
                "{path:?} too short to be a velocity field"
            )));
        }
    }
    let source = if &head == b"AIFMVOL1" {
        read_vector_volume(path)?
    } else {
        read_csv_grid(path)?
    };
    resample(&source, target)
}

/// Structured-grid CSV reader.
fn read_csv_grid(path: &Path) -> Result<VectorVolume> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(path, e))?
        .ok_or_else(|| Error::Ingestion(format!("{path:?} is empty")))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let expected = ["x1", "x2", "x3", "v1", "v2", "v3"];
    for want in expected {
        if !cols.iter().any(|c| c.eq_ignore_ascii_case(want)) {
            return Err(Error::Ingestion(format!(
                "missing column `{want}` in header {header:?}"
            )));
        }
    }
    let col_index: Vec<usize> = expected
        .iter()
        .map(|want| {
            cols.iter()
                .position(|c| c.eq_ignore_ascii_case(want))
                .unwrap()
        })
        .collect();

    let mut rows: Vec<[f64; 6]> = Vec::new();
    for (line_no, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < cols.len() {
            return Err(Error::Ingestion(format!(
                "row {} has {} fields, header has {}",
                line_no + 2,
                fields.len(),
                cols.len()
            )));
        }
        let mut row = [0.0; 6];
        for (slot, &ci) in col_index.iter().enumerate() {
            row[slot] = fields[ci].parse::<f64>().map_err(|e| {
                Error::Ingestion(format!("row {}: bad number {:?}: {e}", line_no + 2, fields[ci]))
            })?;
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Ingestion(format!("{path:?} has no data rows")));
    }

    // unique sorted coordinates per axis
    let axis_coords = |axis: usize| -> Vec<f64> {
        let mut v: Vec<f64> = rows.iter().map(|r| r[axis]).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * a.abs().max(1.0));
        v
    };
    let coords = [axis_coords(0), axis_coords(1), axis_coords(2)];
    let dims = [coords[0].len(), coords[1].len(), coords[2].len()];
    for (axis, c) in coords.iter().enumerate() {
        if c.len() < 2 {
            return Err(Error::Ingestion(format!(
                "axis {axis} has fewer than 2 distinct coordinates"
            )));
        }
        for w in c.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::Ingestion(format!(
                    "axis {axis} coordinates are not strictly monotone"
                )));
            }
        }
    }
    if rows.len() != dims[0] * dims[1] * dims[2] {
        return Err(Error::Ingestion(format!(
            "{} rows do not fill the {}x{}x{} coordinate lattice",
            rows.len(),
            dims[0],
            dims[1],
            dims[2]
        )));
    }

    // The source grid may be non-uniform; store it as a uniform-grid
    // VectorVolume only when spacings agree, otherwise interpolate here
    // onto a uniform grid of the same node counts spanning the same box.
    let uniform = |c: &[f64]| -> Option<f64> {
        let h0 = c[1] - c[0];
        for w in c.windows(2) {
            if ((w[1] - w[0]) - h0).abs() > 1e-9 * h0.abs() {
                return None;
            }
        }
        Some(h0)
    };
    let spacings = [
        uniform(&coords[0]),
        uniform(&coords[1]),
        uniform(&coords[2]),
    ];
    let (Some(h1), Some(h2), Some(h3)) = (spacings[0], spacings[1], spacings[2]) else {
        return Err(Error::Ingestion(
            "non-uniform source grids are not supported".into(),
        ));
    };
    if (h1 - h2).abs() > 1e-9 * h1 || (h1 - h3).abs() > 1e-9 * h1 {
        return Err(Error::Ingestion(format!(
            "anisotropic source spacing ({h1}, {h2}, {h3}) is not supported"
        )));
    }

    let locate = |axis: usize, v: f64| -> Result<usize> {
        let c = &coords[axis];
        let idx = ((v - c[0]) / h1).round() as isize;
        if idx < 0 || idx as usize >= c.len() || (c[idx as usize] - v).abs() > 1e-9 * h1 {
            return Err(Error::Ingestion(format!(
                "coordinate {v} on axis {axis} is off-lattice"
            )));
        }
        Ok(idx as usize)
    };

    let domain = DomainSpec {
        extent: [
            h1 * (dims[0] - 1) as f64,
            h1 * (dims[1] - 1) as f64,
            h1 * (dims[2] - 1) as f64,
        ],
        spacing: h1,
        origin: [coords[0][0], coords[1][0], coords[2][0]],
    };
    domain
        .validate()
        .map_err(|e| Error::Ingestion(format!("source grid invalid: {e}")))?;
    let mut out = VectorVolume::zeros(domain);
    let mut filled = vec![false; domain.len()];
    for row in &rows {
        let i1 = locate(0, row[0])?;
        let i2 = locate(1, row[1])?;
        let i3 = locate(2, row[2])?;
        let off = domain.offset(i1, i2, i3);
        if filled[off] {
            return Err(Error::Ingestion(format!(
                "duplicate lattice point ({}, {}, {})",
                row[0], row[1], row[2]
            )));
        }
        filled[off] = true;
        for a in 0..3 {
            out.components[a].values[off] = row[3 + a];
        }
    }
    if let Some(miss) = filled.iter().position(|&f| !f) {
        return Err(Error::Ingestion(format!(
            "lattice point at flat offset {miss} missing from the CSV"
        )));
    }
    Ok(out)
}

/// Trilinear resample onto the target grid; the source must cover it.
fn resample(source: &VectorVolume, target: DomainSpec) -> Result<VectorVolume> {
    target.validate()?;
    let s = &source.domain;
    let smax = s.max_corner();
    let tmax = target.max_corner();
    let tol = 1e-9 * s.spacing;
    for a in 0..3 {
        if target.origin[a] < s.origin[a] - tol || tmax[a] > smax[a] + tol {
            return Err(Error::Ingestion(format!(
                "source grid [{}, {}] does not cover target [{}, {}] on axis {a}",
                s.origin[a], smax[a], target.origin[a], tmax[a]
            )));
        }
    }
    let clamp_into = |p: [f64; 3]| -> [f64; 3] {
        let mut q = p;
        for a in 0..3 {
            q[a] = q[a].max(s.origin[a]).min(smax[a]);
        }
        q
    };
    let mut out = VectorVolume::zeros(target);
    let [n1, n2, n3] = target.dims();
    for i1 in 0..n1 {
        for i2 in 0..n2 {
            for i3 in 0..n3 {
                let p = clamp_into(target.node_position(i1, i2, i3));
                let v = source.sample(p)?;
                let off = target.offset(i1, i2, i3);
                for a in 0..3 {
                    out.components[a].values[off] = v[a];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::write_vector_volume;
    use std::io::Write;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("aifm-ingest-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn write_csv_field(path: &std::path::Path, n: usize, f: impl Fn([f64; 3]) -> [f64; 3]) {
        let h = 1.0 / (n - 1) as f64;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).unwrap());
        writeln!(w, "x1,x2,x3,v1,v2,v3").unwrap();
        for i1 in 0..n {
            for i2 in 0..n {
                for i3 in 0..n {
                    let p = [h * i1 as f64, h * i2 as f64, h * i3 as f64];
                    let v = f(p);
                    writeln!(w, "{},{},{},{},{},{}", p[0], p[1], p[2], v[0], v[1], v[2]).unwrap();
                }
            }
        }
    }

    #[test]
    fn constant_field_round_trips_through_csv() {
        let path = tmp("const.csv");
        write_csv_field(&path, 6, |_| [0.0, 1.0, 0.0]);
        let target = DomainSpec::with_extent([1.0; 3], 0.125).unwrap();
        let field = ingest_cfd_field(&path, target).unwrap();
        for a in 0..3 {
            for &v in &field.components[a].values {
                let expect = if a == 1 { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn linear_field_resamples_exactly_from_coarse_grid() {
        // trilinear interpolation is exact on linear fields
        let path = tmp("linear.csv");
        write_csv_field(&path, 6, |p| [p[0], 2.0 * p[1] - p[2], 0.5 * p[2]]);
        let target = DomainSpec::with_extent([1.0; 3], 0.05).unwrap();
        let field = ingest_cfd_field(&path, target).unwrap();
        let [n1, n2, n3] = target.dims();
        for i1 in (0..n1).step_by(4) {
            for i2 in (0..n2).step_by(4) {
                for i3 in (0..n3).step_by(4) {
                    let p = target.node_position(i1, i2, i3);
                    let off = target.offset(i1, i2, i3);
                    assert!((field.components[0].values[off] - p[0]).abs() < 1e-9);
                    assert!(
                        (field.components[1].values[off] - (2.0 * p[1] - p[2])).abs() < 1e-9
                    );
                    assert!((field.components[2].values[off] - 0.5 * p[2]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn missing_column_is_named() {
        let path = tmp("missing.csv");
        let mut w = std::fs::File::create(&path).unwrap();
        writeln!(w, "x1,x2,v1,v2,v3").unwrap();
        writeln!(w, "0,0,0,0,0").unwrap();
        match ingest_cfd_field(&path, DomainSpec::with_extent([1.0; 3], 0.25).unwrap()) {
            Err(Error::Ingestion(msg)) => assert!(msg.contains("x3"), "{msg}"),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn coverage_gap_detected() {
        let path = tmp("small.csv");
        write_csv_field(&path, 6, |_| [0.0, 1.0, 0.0]);
        // target extends beyond the unit source box
        let target = DomainSpec::new([1.0; 3], 0.25, [0.5, 0.0, 0.0]).unwrap();
        match ingest_cfd_field(&path, target) {
            Err(Error::Ingestion(msg)) => assert!(msg.contains("cover"), "{msg}"),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn incomplete_lattice_detected() {
        let path = tmp("gappy.csv");
        write_csv_field(&path, 5, |_| [1.0, 0.0, 0.0]);
        // drop the final row
        let content = std::fs::read_to_string(&path).unwrap();
        let truncated: Vec<&str> = content.lines().collect();
        std::fs::write(&path, truncated[..truncated.len() - 1].join("\n")).unwrap();
        match ingest_cfd_field(&path, DomainSpec::with_extent([1.0; 3], 0.25).unwrap()) {
            Err(Error::Ingestion(msg)) => {
                assert!(msg.contains("lattice"), "{msg}")
            }
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn native_container_accepted() {
        let d = DomainSpec::with_extent([1.0; 3], 0.125).unwrap();
        let v = VectorVolume::from_fn(d, |p| [p[1], -p[0], 0.25]);
        let path = tmp("native.avec");
        write_vector_volume(&v, &path).unwrap();
        let target = DomainSpec::with_extent([1.0; 3], 0.25).unwrap();
        let field = ingest_cfd_field(&path, target).unwrap();
        let off = target.offset(1, 2, 3);
        let p = target.node_position(1, 2, 3);
        assert!((field.components[0].values[off] - p[1]).abs() < 1e-6);
        assert!((field.components[1].values[off] + p[0]).abs() < 1e-6);
    }
}
