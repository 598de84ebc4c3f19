//! Discretely observed real-valued fields on a regular lattice, plus the STF1
//! binary format and 1D CSV import.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// How spatial index arithmetic behaves at the lattice edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Boundary {
    /// Periodic: coordinates are taken modulo the extent on every axis.
    #[default]
    Wrap,
    /// Open: cones whose stencil leaves the lattice are dropped.
    Truncate,
}

/// Spatial layout of a field: extent per axis and boundary rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lattice {
    pub extent: Vec<usize>,
    pub boundary: Boundary,
}

impl Lattice {
    pub fn n_sites(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn dims(&self) -> usize {
        self.extent.len()
    }

    /// Row-major multi-index of a flat site index (first axis slowest).
    pub fn unflatten(&self, mut site: usize) -> Vec<usize> {
        let mut idx = vec![0; self.extent.len()];
        for (axis, &len) in self.extent.iter().enumerate().rev() {
            idx[axis] = site % len;
            site /= len;
        }
        idx
    }

    pub fn flatten(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.extent).fold(0, |acc, (&i, &len)| acc * len + i)
    }

    /// Site reached from `site` by the spatial displacement `delta`, or `None`
    /// when the step leaves an open lattice.
    pub fn offset_site(&self, site: usize, delta: &[isize]) -> Option<usize> {
        let mut idx = self.unflatten(site);
        for ((i, &len), &d) in idx.iter_mut().zip(&self.extent).zip(delta) {
            let moved = *i as isize + d;
            *i = match self.boundary {
                Boundary::Wrap => moved.rem_euclid(len as isize) as usize,
                Boundary::Truncate => {
                    if moved < 0 || moved >= len as isize {
                        return None;
                    }
                    moved as usize
                }
            };
        }
        Some(self.flatten(&idx))
    }
}

/// Observations X(r, t) over space × time. Values are stored time-major:
/// `values[t * n_sites + r]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    lattice: Lattice,
    steps: usize,
    values: Vec<f64>,
}

impl Field {
    pub fn new(extent: Vec<usize>, steps: usize, values: Vec<f64>, boundary: Boundary) -> Result<Self> {
        if extent.is_empty() || extent.contains(&0) {
            return Err(invalid("spatial extent must be a nonempty list of positive sizes"));
        }
        if steps == 0 {
            return Err(invalid("field needs at least one time step"));
        }
        let lattice = Lattice { extent, boundary };
        let expected = lattice.n_sites() * steps;
        if values.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: values.len() });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("field values"));
        }
        Ok(Self { lattice, steps, values })
    }

    /// Builds a field by evaluating `f(site, t)` at every point.
    pub fn from_fn(extent: Vec<usize>, steps: usize, boundary: Boundary, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let n: usize = extent.iter().product();
        let values = (0..steps).flat_map(|t| (0..n).map(move |r| (r, t))).map(|(r, t)| f(r, t)).collect();
        Self::new(extent, steps, values, boundary)
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn extent(&self) -> &[usize] {
        &self.lattice.extent
    }

    pub fn boundary(&self) -> Boundary {
        self.lattice.boundary
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.lattice.boundary = boundary;
        self
    }

    pub fn n_sites(&self) -> usize {
        self.lattice.n_sites()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, site: usize, t: usize) -> f64 {
        self.values[t * self.n_sites() + site]
    }

    /// All sites at time `t`.
    pub fn slice(&self, t: usize) -> &[f64] {
        let n = self.n_sites();
        &self.values[t * n..(t + 1) * n]
    }

    /// Sub-field covering time steps `start..end`.
    pub fn time_window(&self, start: usize, end: usize) -> Result<Field> {
        if start >= end || end > self.steps {
            return Err(invalid(format!("time window {start}..{end} outside 0..{}", self.steps)));
        }
        let n = self.n_sites();
        Ok(Field { lattice: self.lattice.clone(), steps: end - start, values: self.values[start * n..end * n].to_vec() })
    }

    /// Circular shift along the first spatial axis by `shift` cells.
    pub fn shift_space(&self, shift: isize) -> Field {
        let n = self.n_sites();
        let mut delta = vec![0isize; self.lattice.dims()];
        delta[0] = shift;
        let wrap = Lattice { extent: self.lattice.extent.clone(), boundary: Boundary::Wrap };
        let mut values = vec![0.0; self.values.len()];
        for t in 0..self.steps {
            for r in 0..n {
                let to = wrap.offset_site(r, &delta).expect("wrap never leaves the lattice");
                values[t * n + to] = self.values[t * n + r];
            }
        }
        Field { lattice: self.lattice.clone(), steps: self.steps, values }
    }
}

pub const STF1_MAGIC: [u8; 8] = *b"STF1\0\0\0\0";

/// Writes the STF1 encoding: magic, u32 spatial rank, u32 extents, u32 T,
/// then f64 values in time-major order, all little-endian.
pub fn write_stf1<W: Write>(field: &Field, mut w: W) -> Result<()> {
    w.write_all(&STF1_MAGIC)?;
    let dims = u32::try_from(field.lattice.dims()).map_err(|_| invalid("too many spatial axes"))?;
    w.write_all(&dims.to_le_bytes())?;
    for &e in field.extent() {
        let e = u32::try_from(e).map_err(|_| invalid("spatial extent exceeds u32"))?;
        w.write_all(&e.to_le_bytes())?;
    }
    let steps = u32::try_from(field.steps).map_err(|_| invalid("time extent exceeds u32"))?;
    w.write_all(&steps.to_le_bytes())?;
    let mut buf = Vec::with_capacity(field.values.len() * 8);
    for v in &field.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| stf_err(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn stf_err(reason: impl Into<String>) -> Error {
    Error::Format { format: "STF1", reason: reason.into() }
}

/// Reads an STF1 stream. The format carries no boundary rule; the caller chooses it.
pub fn read_stf1<R: Read>(mut r: R, boundary: Boundary) -> Result<Field> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| stf_err(format!("missing magic: {e}")))?;
    if magic != STF1_MAGIC {
        return Err(stf_err("bad magic"));
    }
    let dims = read_u32(&mut r)? as usize;
    if dims == 0 || dims > 8 {
        return Err(stf_err(format!("unsupported spatial rank {dims}")));
    }
    let extent = (0..dims).map(|_| read_u32(&mut r).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
    let steps = read_u32(&mut r)? as usize;
    let count = extent.iter().product::<usize>() * steps;
    let mut bytes = Vec::with_capacity(count * 8);
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 8 {
        return Err(stf_err(format!("expected {} value bytes, found {}", count * 8, bytes.len())));
    }
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Field::new(extent, steps, values, boundary)
}

pub fn save_stf1(field: &Field, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_stf1(field, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_stf1(path: impl AsRef<Path>, boundary: Boundary) -> Result<Field> {
    let f = std::fs::File::open(path)?;
    read_stf1(std::io::BufReader::new(f), boundary)
}

/// Imports a 1D field from CSV with one row per site and one column per time step.
pub fn read_csv_1d<R: Read>(r: R, boundary: Boundary) -> Result<Field> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(r);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format { format: "CSV", reason: e.to_string() })?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format { format: "CSV", reason: format!("row {}: {e}", line + 1) })?;
        rows.push(row);
    }
    let sites = rows.len();
    let steps = rows.first().map_or(0, Vec::len);
    if sites == 0 || steps == 0 {
        return Err(Error::Format { format: "CSV", reason: "no data".into() });
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != steps) {
        return Err(Error::Format { format: "CSV", reason: format!("row {} has a different length", bad + 1) });
    }
    Field::from_fn(vec![sites], steps, boundary, |r, t| rows[r][t])
}

pub fn load_csv_1d(path: impl AsRef<Path>, boundary: Boundary) -> Result<Field> {
    read_csv_1d(std::fs::File::open(path)?, boundary)
}
