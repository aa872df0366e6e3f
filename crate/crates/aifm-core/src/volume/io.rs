//! Binary container family for volumes and trace sets, plus text exports.
//!
//! Volume container layout (all integers and floats little-endian):
//!
//! ```text
//! offset size field
//! 0      8    magic  b"AIFMVOL1"
//! 8      4    element kind: u32 (1 = scalar f32, 3 = vector f32 x3)
//! 12     4    reserved, zero
//! 16     8    n1: u64
//! 24     8    n2: u64
//! 32     8    n3: u64
//! 40     8    spacing: f64
//! 48     24   origin: 3 x f64
//! 72     ..   payload: kind * n1*n2*n3 f32, node (i1,i2,i3) at offset
//!             i3 + n3*(i2 + n2*i1); vector payload stores the full v1
//!             block, then v2, then v3
//! ```
//!
//! Trace container:
//!
//! ```text
//! 0      8    magic  b"AIFMTRC1"
//! 8      4    element kind: u32 (1 = f32)
//! 12     4    reserved, zero
//! 16     8    n_sources: u64
//! 24     8    n_receivers: u64
//! 32     8    n_steps: u64
//! 40     8    sample interval dt: f64
//! 48     ..   payload: M*N*n_t f32, time fastest, then receiver, then source
//! ```
//!
//! Values are f32 on disk and f64 in memory. Writing casts with `as f32`;
//! round-trips of f32-representable data are bit-exact.

use super::{DomainSpec, ScalarVolume, VectorVolume};
use crate::acoustics::TraceSet;
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const VOLUME_MAGIC: &[u8; 8] = b"AIFMVOL1";
const TRACE_MAGIC: &[u8; 8] = b"AIFMTRC1";
const KIND_SCALAR: u32 = 1;
const KIND_VECTOR: u32 = 3;
/// Refuse containers whose payload would exceed this many elements.
const MAX_ELEMENTS: u64 = 1 << 33;

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    fn f32_slice(&mut self, vals: &[f64]) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(4 * vals.len().min(1 << 16));
        for chunk in vals.chunks(1 << 16) {
            buf.clear();
            for &v in chunk {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            self.inner.write_all(&buf)?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn new(inner: R) -> Self {
        Reader { inner, offset: 0 }
    }

    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        let at = self.offset;
        let mut read = 0;
        while read < N {
            match self.inner.read(&mut buf[read..]) {
                Ok(0) => {
                    return Err(Error::format(
                        at,
                        format!("truncated while reading {what}: expected {N} bytes, got {read}"),
                    ))
                }
                Ok(n) => read += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(Error::format(at, format!("read failed for {what}: {e}"))),
            }
        }
        self.offset += N as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes::<4>(what)?))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes::<8>(what)?))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes::<8>(what)?))
    }

    fn f32_payload(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.offset;
        let mut out = Vec::with_capacity(count);
        let mut buf = vec![0u8; 4 * (1 << 16).min(count.max(1))];
        let mut remaining = count;
        while remaining > 0 {
            let take = remaining.min(1 << 16);
            let bytes = &mut buf[..4 * take];
            let mut read = 0;
            while read < bytes.len() {
                match self.inner.read(&mut bytes[read..]) {
                    Ok(0) => {
                        return Err(Error::format(
                            self.offset + read as u64,
                            format!(
                                "truncated {what} payload: expected {} bytes from offset {start}, \
                                 got {}",
                                4 * count,
                                self.offset - start + read as u64
                            ),
                        ))
                    }
                    Ok(n) => read += n,
                    Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                    Err(e) => {
                        return Err(Error::format(self.offset, format!("payload read: {e}")))
                    }
                }
            }
            for w in bytes.chunks_exact(4) {
                out.push(f32::from_le_bytes([w[0], w[1], w[2], w[3]]) as f64);
            }
            self.offset += bytes.len() as u64;
            remaining -= take;
        }
        Ok(out)
    }

    fn expect_eof(&mut self, what: &str) -> Result<()> {
        let mut one = [0u8; 1];
        match self.inner.read(&mut one) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::format(
                self.offset,
                format!("trailing bytes after {what} payload"),
            )),
            Err(e) => Err(Error::format(self.offset, format!("read: {e}"))),
        }
    }
}

fn open_writer(path: &Path) -> Result<Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(Writer {
        inner: BufWriter::new(file),
    })
}

fn open_reader(path: &Path) -> Result<Reader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(Reader::new(BufReader::new(file)))
}

fn volume_header<W: Write>(w: &mut Writer<W>, kind: u32, d: &DomainSpec) -> Result<()> {
    let [n1, n2, n3] = d.dims();
    (|| -> std::io::Result<()> {
        w.inner.write_all(VOLUME_MAGIC)?;
        w.u32(kind)?;
        w.u32(0)?;
        w.u64(n1 as u64)?;
        w.u64(n2 as u64)?;
        w.u64(n3 as u64)?;
        w.f64(d.spacing)?;
        for &o in &d.origin {
            w.f64(o)?;
        }
        Ok(())
    })()
    .map_err(|e| Error::io("<volume header>", e))
}

fn read_volume_header<R: Read>(r: &mut Reader<R>) -> Result<(u32, DomainSpec)> {
    let magic = r.bytes::<8>("magic")?;
    if &magic != VOLUME_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, want AIFMVOL1")));
    }
    let kind = r.u32("element kind")?;
    if kind != KIND_SCALAR && kind != KIND_VECTOR {
        return Err(Error::format(8, format!("unknown element kind {kind}")));
    }
    let _reserved = r.u32("reserved")?;
    let dims_at = r.offset;
    let n1 = r.u64("n1")?;
    let n2 = r.u64("n2")?;
    let n3 = r.u64("n3")?;
    if n1 == 0 || n2 == 0 || n3 == 0 {
        return Err(Error::format(dims_at, format!("zero dimension {n1}x{n2}x{n3}")));
    }
    let count = n1
        .checked_mul(n2)
        .and_then(|v| v.checked_mul(n3))
        .filter(|&v| v <= MAX_ELEMENTS)
        .ok_or_else(|| {
            Error::format(dims_at, format!("dimension overflow {n1}x{n2}x{n3}"))
        })?;
    let _ = count;
    let spacing = r.f64("spacing")?;
    let origin = [r.f64("origin1")?, r.f64("origin2")?, r.f64("origin3")?];
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(Error::format(40, format!("bad spacing {spacing}")));
    }
    let domain = DomainSpec {
        extent: [
            spacing * (n1 - 1) as f64,
            spacing * (n2 - 1) as f64,
            spacing * (n3 - 1) as f64,
        ],
        spacing,
        origin,
    };
    domain
        .validate()
        .map_err(|e| Error::format(16, format!("header describes invalid domain: {e}")))?;
    Ok((kind, domain))
}

pub fn write_volume(vol: &ScalarVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = open_writer(path)?;
    volume_header(&mut w, KIND_SCALAR, &vol.domain)?;
    w.f32_slice(&vol.values).map_err(|e| Error::io(path, e))?;
    w.inner.flush().map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    let mut r = open_reader(path.as_ref())?;
    let (kind, domain) = read_volume_header(&mut r)?;
    if kind != KIND_SCALAR {
        return Err(Error::format(8, "expected scalar volume, found vector"));
    }
    let values = r.f32_payload(domain.len(), "scalar volume")?;
    r.expect_eof("scalar volume")?;
    ScalarVolume::from_values(domain, values)
}

pub fn write_vector_volume(vol: &VectorVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = open_writer(path)?;
    volume_header(&mut w, KIND_VECTOR, &vol.domain)?;
    for comp in &vol.components {
        w.f32_slice(&comp.values).map_err(|e| Error::io(path, e))?;
    }
    w.inner.flush().map_err(|e| Error::io(path, e))
}

pub fn read_vector_volume(path: impl AsRef<Path>) -> Result<VectorVolume> {
    let mut r = open_reader(path.as_ref())?;
    let (kind, domain) = read_volume_header(&mut r)?;
    if kind != KIND_VECTOR {
        return Err(Error::format(8, "expected vector volume, found scalar"));
    }
    let n = domain.len();
    let c1 = r.f32_payload(n, "vector volume v1")?;
    let c2 = r.f32_payload(n, "vector volume v2")?;
    let c3 = r.f32_payload(n, "vector volume v3")?;
    r.expect_eof("vector volume")?;
    Ok(VectorVolume {
        domain,
        components: [
            ScalarVolume::from_values(domain, c1)?,
            ScalarVolume::from_values(domain, c2)?,
            ScalarVolume::from_values(domain, c3)?,
        ],
    })
}

pub fn write_trace_set(traces: &TraceSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = open_writer(path)?;
    (|| -> std::io::Result<()> {
        w.inner.write_all(TRACE_MAGIC)?;
        w.u32(KIND_SCALAR)?;
        w.u32(0)?;
        w.u64(traces.n_sources as u64)?;
        w.u64(traces.n_receivers as u64)?;
        w.u64(traces.n_steps as u64)?;
        w.f64(traces.sample_interval)?;
        Ok(())
    })()
    .map_err(|e| Error::io(path, e))?;
    w.f32_slice(&traces.samples).map_err(|e| Error::io(path, e))?;
    w.inner.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace_set(path: impl AsRef<Path>) -> Result<TraceSet> {
    let mut r = open_reader(path.as_ref())?;
    let magic = r.bytes::<8>("magic")?;
    if &magic != TRACE_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, want AIFMTRC1")));
    }
    let kind = r.u32("element kind")?;
    if kind != KIND_SCALAR {
        return Err(Error::format(8, format!("unknown trace element kind {kind}")));
    }
    let _reserved = r.u32("reserved")?;
    let dims_at = r.offset;
    let m = r.u64("n_sources")?;
    let n = r.u64("n_receivers")?;
    let nt = r.u64("n_steps")?;
    let count = m
        .checked_mul(n)
        .and_then(|v| v.checked_mul(nt))
        .filter(|&v| v > 0 && v <= MAX_ELEMENTS)
        .ok_or_else(|| Error::format(dims_at, format!("bad trace dimensions {m}x{n}x{nt}")))?;
    let dt = r.f64("sample interval")?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::format(40, format!("bad sample interval {dt}")));
    }
    let samples = r.f32_payload(count as usize, "trace")?;
    r.expect_eof("trace")?;
    Ok(TraceSet {
        n_sources: m as usize,
        n_receivers: n as usize,
        n_steps: nt as usize,
        sample_interval: dt,
        samples,
    })
}

/// Legacy VTK structured-points text export for visualisation.
///
/// VTK orders points x-fastest; axis 1 is mapped to VTK x via the loop
/// nesting below, so tools display (x1, x2, x3) as (x, y, z).
pub fn export_vtk(vol: &ScalarVolume, name: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let [n1, n2, n3] = vol.domain.dims();
    let d = &vol.domain;
    (|| -> std::io::Result<()> {
        writeln!(w, "# vtk DataFile Version 3.0")?;
        writeln!(w, "{name}")?;
        writeln!(w, "ASCII")?;
        writeln!(w, "DATASET STRUCTURED_POINTS")?;
        writeln!(w, "DIMENSIONS {n1} {n2} {n3}")?;
        writeln!(w, "ORIGIN {} {} {}", d.origin[0], d.origin[1], d.origin[2])?;
        writeln!(w, "SPACING {} {} {}", d.spacing, d.spacing, d.spacing)?;
        writeln!(w, "POINT_DATA {}", vol.values.len())?;
        writeln!(w, "SCALARS {name} float 1")?;
        writeln!(w, "LOOKUP_TABLE default")?;
        for i3 in 0..n3 {
            for i2 in 0..n2 {
                for i1 in 0..n1 {
                    writeln!(w, "{}", vol.get(i1, i2, i3) as f32)?;
                }
            }
        }
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

/// One receiver's trace as `t,value` CSV rows.
pub fn export_trace_csv(
    traces: &TraceSet,
    source: usize,
    receiver: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if source >= traces.n_sources || receiver >= traces.n_receivers {
        return Err(Error::validation(format!(
            "trace index ({source},{receiver}) out of range {}x{}",
            traces.n_sources, traces.n_receivers
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        writeln!(w, "t,value")?;
        for step in 0..traces.n_steps {
            let t = (step + 1) as f64 * traces.sample_interval;
            writeln!(w, "{},{}", t, traces.sample(source, receiver, step))?;
        }
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

/// Receiver positions as `s,x1,x2,x3` CSV rows.
pub fn export_receiver_csv(positions: &[[f64; 3]], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        writeln!(w, "s,x1,x2,x3")?;
        for (s, p) in positions.iter().enumerate() {
            writeln!(w, "{},{},{},{}", s, p[0], p[1], p[2])?;
        }
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}
