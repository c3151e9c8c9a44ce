//! Gridded spatial domains, fields over them and cohorts located on them.
//!
//! Cells are indexed row-major from the origin: cell `s` sits in column
//! `s % M` (the `u` direction) and row `s / M` (the `v` direction). Every
//! other module relies on this convention.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A rectangular lattice of `m` columns by `n` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    m: usize,
    n: usize,
    spacing_u: f64,
    spacing_v: f64,
    origin: (f64, f64),
}

impl Grid {
    pub fn new(m: usize, n: usize, spacing_u: f64, spacing_v: f64, origin: (f64, f64)) -> Result<Self> {
        if m < 2 || n < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2x2 cells, got {m}x{n}")));
        }
        if !(spacing_u > 0.0 && spacing_v > 0.0) || !spacing_u.is_finite() || !spacing_v.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive, got ({spacing_u}, {spacing_v})"
            )));
        }
        if !origin.0.is_finite() || !origin.1.is_finite() {
            return Err(Error::NonFinite("grid origin"));
        }
        Ok(Self { m, n, spacing_u, spacing_v, origin })
    }

    /// `m` x `n` cells covering `[0, 1) x [0, 1)`.
    pub fn unit_square(m: usize, n: usize) -> Result<Self> {
        Self::new(m, n, 1.0 / m as f64, 1.0 / n as f64, (0.0, 0.0))
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spacing_u(&self) -> f64 {
        self.spacing_u
    }

    pub fn spacing_v(&self) -> f64 {
        self.spacing_v
    }

    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }

    pub fn cells(&self) -> usize {
        self.m * self.n
    }

    /// Domain extent along `u` and `v`.
    pub fn extent(&self) -> (f64, f64) {
        (self.m as f64 * self.spacing_u, self.n as f64 * self.spacing_v)
    }

    pub fn diameter(&self) -> f64 {
        let (a, b) = self.extent();
        a.hypot(b)
    }

    pub fn index(&self, col: usize, row: usize) -> usize {
        debug_assert!(col < self.m && row < self.n);
        row * self.m + col
    }

    pub fn col_row(&self, s: usize) -> (usize, usize) {
        (s % self.m, s / self.m)
    }

    /// Cell-centre coordinates of cell `s`.
    pub fn coords(&self, s: usize) -> [f64; 2] {
        let (col, row) = self.col_row(s);
        [
            self.origin.0 + (col as f64 + 0.5) * self.spacing_u,
            self.origin.1 + (row as f64 + 0.5) * self.spacing_v,
        ]
    }

    /// Position of cell `s` as a fraction of the domain, in `[0, 1)`.
    pub fn unit_coords(&self, s: usize) -> [f64; 2] {
        let (col, row) = self.col_row(s);
        [(col as f64 + 0.5) / self.m as f64, (row as f64 + 0.5) / self.n as f64]
    }

    /// Cell whose centre is nearest to `(u, v)`, or `None` outside the grid.
    pub fn snap(&self, u: f64, v: f64) -> Option<usize> {
        if !u.is_finite() || !v.is_finite() {
            return None;
        }
        let cu = ((u - self.origin.0) / self.spacing_u).floor();
        let cv = ((v - self.origin.1) / self.spacing_v).floor();
        // Points on the outer edge belong to the last cell.
        let clamp = |c: f64, len: usize, tol: f64| -> Option<usize> {
            if c >= 0.0 && c < len as f64 {
                Some(c as usize)
            } else if c == len as f64 && tol <= 1e-9 {
                Some(len - 1)
            } else {
                None
            }
        };
        let edge_u = (u - self.origin.0 - self.m as f64 * self.spacing_u).abs() / self.spacing_u;
        let edge_v = (v - self.origin.1 - self.n as f64 * self.spacing_v).abs() / self.spacing_v;
        let col = clamp(cu, self.m, edge_u)?;
        let row = clamp(cv, self.n, edge_v)?;
        Some(self.index(col, row))
    }

    pub fn coords_of(&self, cells: &[usize]) -> Vec<[f64; 2]> {
        cells.iter().map(|&s| self.coords(s)).collect()
    }

    pub fn all_coords(&self) -> Vec<[f64; 2]> {
        (0..self.cells()).map(|s| self.coords(s)).collect()
    }
}

/// A real-valued surface attached to a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
    mask: Option<Vec<bool>>,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        Self::with_mask(grid, values, None)
    }

    pub fn with_mask(grid: Grid, values: Vec<f64>, mask: Option<Vec<bool>>) -> Result<Self> {
        if values.len() != grid.cells() {
            return Err(Error::DimensionMismatch { expected: grid.cells(), found: values.len() });
        }
        if let Some(mask) = &mask {
            if mask.len() != grid.cells() {
                return Err(Error::DimensionMismatch { expected: grid.cells(), found: mask.len() });
            }
        }
        let field = Self { grid, values, mask };
        if field.valid_values().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field values"));
        }
        Ok(field)
    }

    pub fn zeros(grid: Grid) -> Self {
        let cells = grid.cells();
        Self { grid, values: vec![0.0; cells], mask: None }
    }

    /// Evaluates `f(u, v)` at every cell centre.
    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = (0..grid.cells())
            .map(|s| {
                let [u, v] = grid.coords(s);
                f(u, v)
            })
            .collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn is_valid(&self, s: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[s])
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[self.grid.index(col, row)]
    }

    fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().enumerate().filter(|(s, _)| self.is_valid(*s)).map(|(_, v)| *v)
    }

    /// Values with masked-out cells replaced by `fill`.
    pub fn filled(&self, fill: f64) -> Vec<f64> {
        self.values
            .iter()
            .enumerate()
            .map(|(s, &v)| if self.is_valid(s) { v } else { fill })
            .collect()
    }

    /// Same grid and mask, new values; masked-out cells are set to zero.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        let mut out = Self::with_mask(self.grid.clone(), values, self.mask.clone())?;
        out.apply_mask(0.0);
        Ok(out)
    }

    pub(crate) fn apply_mask(&mut self, fill: f64) {
        if let Some(mask) = &self.mask {
            for (v, &keep) in self.values.iter_mut().zip(mask) {
                if !keep {
                    *v = fill;
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        let (sum, count) = self.valid_values().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
        sum / count as f64
    }

    /// Population variance over masked-in cells.
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        let (ss, count) =
            self.valid_values().fold((0.0, 0usize), |(s, c), v| (s + (v - mean).powi(2), c + 1));
        ss / count as f64
    }

    /// Rescales masked-in values to mean 0 and (population) variance 1.
    pub fn standardize(&self) -> Result<Self> {
        let mean = self.mean();
        let sd = self.variance().sqrt();
        if !(sd > 0.0) {
            return Err(Error::InvalidConfig("cannot standardize a constant field".into()));
        }
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(s, &v)| if self.is_valid(s) { (v - mean) / sd } else { v })
            .collect();
        Self::with_mask(self.grid.clone(), values, self.mask.clone())
    }

    /// Inner product over masked-in cells.
    pub fn dot(&self, other: &Field) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .enumerate()
            .filter(|(s, _)| self.is_valid(*s))
            .map(|(_, (a, b))| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Embeds the field in the lower-left block of a square grid whose side
    /// is the next power of two. Added cells carry `fill` and are masked out.
    pub fn embed_dyadic(&self, fill: f64) -> Field {
        let side = self.grid.m.max(self.grid.n).next_power_of_two();
        if side == self.grid.m && side == self.grid.n {
            return self.clone();
        }
        let grid = Grid {
            m: side,
            n: side,
            spacing_u: self.grid.spacing_u,
            spacing_v: self.grid.spacing_v,
            origin: self.grid.origin,
        };
        let mut values = vec![fill; side * side];
        let mut mask = vec![false; side * side];
        for row in 0..self.grid.n {
            for col in 0..self.grid.m {
                let src = self.grid.index(col, row);
                let dst = row * side + col;
                values[dst] = self.values[src];
                mask[dst] = self.is_valid(src);
            }
        }
        Field { grid, values, mask: Some(mask) }
    }

    /// Extracts the lower-left block matching `grid`; inverse of
    /// [`Field::embed_dyadic`] when given the original grid and mask.
    pub fn crop(&self, grid: &Grid, mask: Option<&[bool]>) -> Result<Field> {
        if grid.m > self.grid.m || grid.n > self.grid.n {
            return Err(Error::InvalidGrid(format!(
                "cannot crop {}x{} out of {}x{}",
                grid.m, grid.n, self.grid.m, self.grid.n
            )));
        }
        let mut values = Vec::with_capacity(grid.cells());
        for row in 0..grid.n {
            for col in 0..grid.m {
                values.push(self.values[self.grid.index(col, row)]);
            }
        }
        Field::with_mask(grid.clone(), values, mask.map(<[bool]>::to_vec))
    }

    /// Writes `u,v,value` rows for masked-in cells.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["u", "v", "value"])?;
        for s in 0..self.grid.cells() {
            if self.is_valid(s) {
                let [u, v] = self.grid.coords(s);
                w.write_record([u.to_string(), v.to_string(), self.values[s].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `u,v,value` rows, snapping each point to its cell. Cells not
    /// listed are masked out with value 0.
    pub fn read_csv<R: Read>(reader: R, grid: Grid) -> Result<Field> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("missing column `{name}`"),
            })
        };
        let (iu, iv, ival) = (col("u")?, col("v")?, col("value")?);
        let mut values = vec![0.0; grid.cells()];
        let mut mask = vec![false; grid.cells()];
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            let u = parse_f64(&rec, iu, "u", line)?;
            let v = parse_f64(&rec, iv, "v", line)?;
            let value = parse_f64(&rec, ival, "value", line)?;
            let s = grid.snap(u, v).ok_or_else(|| Error::Parse {
                line,
                message: format!("point ({u}, {v}) lies outside the grid"),
            })?;
            values[s] = value;
            mask[s] = true;
        }
        let mask = if mask.iter().all(|&m| m) { None } else { Some(mask) };
        Field::with_mask(grid, values, mask)
    }

    /// Binary layout: `M`, `N` as little-endian `u32`, then `M*N`
    /// little-endian `f64` values in row-major order.
    pub fn write_binary<W: Write>(&self, mut writer: W) -> Result<()> {
        writer.write_all(&(self.grid.m as u32).to_le_bytes())?;
        writer.write_all(&(self.grid.n as u32).to_le_bytes())?;
        for v in self.filled(0.0) {
            writer.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads the binary layout of [`Field::write_binary`] onto a grid with
    /// the given cell spacing and origin.
    pub fn read_binary<R: Read>(mut reader: R, spacing: (f64, f64), origin: (f64, f64)) -> Result<Field> {
        let mut word = [0u8; 4];
        reader.read_exact(&mut word)?;
        let m = u32::from_le_bytes(word) as usize;
        reader.read_exact(&mut word)?;
        let n = u32::from_le_bytes(word) as usize;
        let grid = Grid::new(m, n, spacing.0, spacing.1, origin)?;
        let mut values = Vec::with_capacity(grid.cells());
        let mut buf = [0u8; 8];
        for _ in 0..grid.cells() {
            reader.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        Field::new(grid, values)
    }
}

fn parse_f64(rec: &csv::StringRecord, idx: usize, name: &str, line: usize) -> Result<f64> {
    let raw = rec.get(idx).ok_or_else(|| Error::Parse { line, message: format!("missing value for `{name}`") })?;
    let v: f64 = raw
        .parse()
        .map_err(|_| Error::Parse { line, message: format!("cannot parse `{name}` value `{raw}`") })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, message: format!("non-finite `{name}` value") });
    }
    Ok(v)
}

/// Subjects with a grid location, exposure, outcome and optional measured
/// covariates and weights.
#[derive(Clone, Debug)]
pub struct Cohort {
    location_index: Vec<usize>,
    y: Vec<f64>,
    x: Vec<f64>,
    z: Option<DMatrix<f64>>,
    weights: Option<Vec<f64>>,
}

impl Cohort {
    pub fn new(
        grid: &Grid,
        location_index: Vec<usize>,
        y: Vec<f64>,
        x: Vec<f64>,
        z: Option<DMatrix<f64>>,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = location_index.len();
        if n == 0 {
            return Err(Error::InvalidConfig("cohort has no subjects".into()));
        }
        for len in [y.len(), x.len()] {
            if len != n {
                return Err(Error::DimensionMismatch { expected: n, found: len });
            }
        }
        if let Some(&bad) = location_index.iter().find(|&&s| s >= grid.cells()) {
            return Err(Error::LocationOutOfRange { index: bad, cells: grid.cells() });
        }
        if y.iter().chain(&x).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cohort x/y"));
        }
        if let Some(z) = &z {
            if z.nrows() != n {
                return Err(Error::DimensionMismatch { expected: n, found: z.nrows() });
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("cohort z"));
            }
        }
        if let Some(w) = &weights {
            if w.len() != n {
                return Err(Error::DimensionMismatch { expected: n, found: w.len() });
            }
            if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidConfig("weights must be positive and finite".into()));
            }
        }
        Ok(Self { location_index, y, x, z, weights })
    }

    pub fn len(&self) -> usize {
        self.location_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.location_index.is_empty()
    }

    pub fn location_index(&self) -> &[usize] {
        &self.location_index
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn z(&self) -> Option<&DMatrix<f64>> {
        self.z.as_ref()
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// Number of measured covariates.
    pub fn p(&self) -> usize {
        self.z.as_ref().map_or(0, |z| z.ncols())
    }

    pub fn with_weights(mut self, weights: Option<Vec<f64>>) -> Result<Self> {
        if let Some(w) = &weights {
            if w.len() != self.len() {
                return Err(Error::DimensionMismatch { expected: self.len(), found: w.len() });
            }
            if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidConfig("weights must be positive and finite".into()));
            }
        }
        self.weights = weights;
        Ok(self)
    }

    /// Weights `1 / n_s` where `n_s` counts subjects sharing a location.
    pub fn inverse_count_weights(&self) -> Vec<f64> {
        let mult = dedupe_locations(self);
        self.location_index
            .iter()
            .enumerate()
            .map(|(i, _)| 1.0 / mult.counts[mult.subject_to_unique[i]] as f64)
            .collect()
    }

    /// Reads `id,u,v,x,y[,z1..zp][,weight]`; coordinates are snapped to the
    /// nearest cell centre.
    pub fn read_csv<R: Read>(reader: R, grid: &Grid) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("missing column `{name}`"),
            })
        };
        let (iu, iv, ix, iy) = (col("u")?, col("v")?, col("x")?, col("y")?);
        col("id")?;
        let mut z_cols: Vec<(usize, usize)> = headers
            .iter()
            .enumerate()
            .filter_map(|(i, h)| h.strip_prefix('z').and_then(|k| k.parse::<usize>().ok()).map(|k| (k, i)))
            .collect();
        z_cols.sort_unstable();
        for (expect, (k, _)) in (1..).zip(&z_cols) {
            if *k != expect {
                return Err(Error::Parse { line: 1, message: format!("missing column `z{expect}`") });
            }
        }
        let iw = headers.iter().position(|h| h == "weight");

        let (mut loc, mut xs, mut ys, mut zs, mut ws) = (vec![], vec![], vec![], vec![], vec![]);
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
            let u = parse_f64(&rec, iu, "u", line)?;
            let v = parse_f64(&rec, iv, "v", line)?;
            let s = grid.snap(u, v).ok_or_else(|| Error::Parse {
                line,
                message: format!("location ({u}, {v}) lies outside the grid"),
            })?;
            loc.push(s);
            xs.push(parse_f64(&rec, ix, "x", line)?);
            ys.push(parse_f64(&rec, iy, "y", line)?);
            for (k, idx) in &z_cols {
                zs.push(parse_f64(&rec, *idx, &format!("z{k}"), line)?);
            }
            if let Some(iw) = iw {
                let w = parse_f64(&rec, iw, "weight", line)?;
                if w <= 0.0 {
                    return Err(Error::Parse { line, message: "weight must be positive".into() });
                }
                ws.push(w);
            }
        }
        let n = loc.len();
        let z = (!z_cols.is_empty()).then(|| DMatrix::from_row_slice(n, z_cols.len(), &zs));
        let weights = iw.map(|_| ws);
        Self::new(grid, loc, ys, xs, z, weights)
    }
}

/// Unique locations of a cohort and how often each occurs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocationMultiplicity {
    pub unique_locations: Vec<usize>,
    pub counts: Vec<usize>,
    pub subject_to_unique: Vec<usize>,
}

impl LocationMultiplicity {
    /// Repeats per-unique-location values back out to subjects.
    pub fn expand<T: Copy>(&self, per_unique: &[T]) -> Vec<T> {
        self.subject_to_unique.iter().map(|&u| per_unique[u]).collect()
    }
}

/// Collapses repeated cells, keeping first-occurrence order.
pub fn dedupe_locations(cohort: &Cohort) -> LocationMultiplicity {
    dedupe_cells(cohort.location_index())
}

pub fn dedupe_cells(cells: &[usize]) -> LocationMultiplicity {
    let mut lookup: HashMap<usize, usize> = HashMap::with_capacity(cells.len());
    let mut unique_locations = Vec::new();
    let mut counts = Vec::new();
    let subject_to_unique = cells
        .iter()
        .map(|&s| {
            let k = *lookup.entry(s).or_insert_with(|| {
                unique_locations.push(s);
                counts.push(0);
                unique_locations.len() - 1
            });
            counts[k] += 1;
            k
        })
        .collect();
    LocationMultiplicity { unique_locations, counts, subject_to_unique }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingScheme {
    #[default]
    UniformWithoutReplacement,
    UniformWithReplacement,
}

/// Draws `n` cell indices uniformly.
pub fn sample_locations<R: Rng + ?Sized>(
    grid: &Grid,
    n: usize,
    scheme: SamplingScheme,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let cells = grid.cells();
    match scheme {
        SamplingScheme::UniformWithoutReplacement => {
            if n > cells {
                return Err(Error::SampleTooLarge { requested: n, available: cells });
            }
            Ok(index::sample(rng, cells, n).into_vec())
        }
        SamplingScheme::UniformWithReplacement => Ok((0..n).map(|_| rng.random_range(0..cells)).collect()),
    }
}
