//! Unpenalised thin-plate regression spline (TPRS) bases.
//!
//! The radial kernel is `eta(r) = r^2 log(r) / (8 pi)` with `eta(0) = 0`. For
//! `df` degrees of freedom the basis spans the affine polynomials `{1, u, v}`
//! together with `E U_df w`, where `U_df` holds the `df` eigenvectors of the
//! knot kernel matrix `E` with largest absolute eigenvalue and `w` ranges over
//! the null space of `T' U_df` (`T` the polynomial block), which has
//! dimension `df - 3`.
//!
//! Those spaces are nested in `df`. [`TprsSpace`] exploits that: a single
//! eigendecomposition for the largest requested `df` yields an ordered set of
//! radial directions such that the basis for any smaller `df` is a prefix.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{dedupe_cells, Grid};
use crate::linalg;

/// Above this many unique locations the eigenproblem is solved on a uniform
/// subsample of knots and the basis is evaluated at every location.
pub const MAX_KNOTS: usize = 4000;

const KNOT_SEED: u64 = 0x7e7a_5eed;

/// What the column order of a basis means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisOrdering {
    TprsDf,
    FourierFrequency,
    WaveletLevel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BasisMeta {
    Tprs { df: usize },
    Fourier { cutoff: f64 },
    Wavelet { level: usize },
    Custom,
}

/// `n x m` evaluation of hierarchical basis functions.
#[derive(Clone, Debug)]
pub struct BasisMatrix {
    values: DMatrix<f64>,
    ordering: BasisOrdering,
    meta: BasisMeta,
}

impl BasisMatrix {
    pub fn new(values: DMatrix<f64>, ordering: BasisOrdering, meta: BasisMeta) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("basis values"));
        }
        Ok(Self { values, ordering, meta })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn ordering(&self) -> BasisOrdering {
        self.ordering
    }

    pub fn meta(&self) -> &BasisMeta {
        &self.meta
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    /// Repeats rows: row `i` of the result is row `rows[i]` of `self`.
    pub fn select_rows(&self, rows: &[usize]) -> BasisMatrix {
        let values = DMatrix::from_fn(rows.len(), self.ncols(), |i, j| self.values[(rows[i], j)]);
        BasisMatrix { values, ordering: self.ordering, meta: self.meta.clone() }
    }

    /// Writes the basis columns as CSV with header `h1,...,hm`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record((1..=self.ncols()).map(|j| format!("h{j}")))?;
        for row in self.values.row_iter() {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The projection `S = H (H'H)^-1 H'`, stored through an orthonormal basis
/// `Q` of the column space so that `S = Q Q'`.
#[derive(Clone, Debug)]
pub struct SmoothingMatrix {
    q: DMatrix<f64>,
}

impl SmoothingMatrix {
    /// Wraps a matrix whose columns are already orthonormal.
    pub fn from_orthonormal(q: DMatrix<f64>) -> Self {
        Self { q }
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    pub fn rank(&self) -> usize {
        self.q.ncols()
    }

    pub fn orthonormal_basis(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn column(&self, i: usize) -> DVector<f64> {
        &self.q * self.q.row(i).transpose()
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.q.row(i).dot(&self.q.row(j))
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.q * (self.q.transpose() * v)
    }

    pub fn trace(&self) -> f64 {
        self.q.iter().map(|v| v * v).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        &self.q * self.q.transpose()
    }
}

/// Smoothing matrix of a full-rank basis. Rank deficiency is an error.
pub fn smoothing_matrix(basis: &BasisMatrix) -> Result<SmoothingMatrix> {
    Ok(SmoothingMatrix { q: linalg::orthonormalize(basis.values())? })
}

/// Splits `x` into its projection onto the basis column space and the
/// orthogonal complement.
pub fn project_decompose(x: &[f64], basis: &BasisMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != basis.nrows() {
        return Err(Error::DimensionMismatch { expected: basis.nrows(), found: x.len() });
    }
    let (q, _) = linalg::guarded_orthonormalize(basis.values());
    let xv = DVector::from_column_slice(x);
    let x1 = &q * (q.transpose() * &xv);
    let x2 = &xv - &x1;
    Ok((x1.as_slice().to_vec(), x2.as_slice().to_vec()))
}

/// Thin-plate radial kernel for two-dimensional smoothing.
pub fn radial_kernel(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        r * r * r.ln() / (8.0 * std::f64::consts::PI)
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Kernel matrix between `rows` and `cols` point sets.
pub fn kernel_matrix(rows: &[[f64; 2]], cols: &[[f64; 2]]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| radial_kernel(dist(rows[i], cols[j])))
}

fn polynomial_block(points: &[[f64; 2]]) -> DMatrix<f64> {
    DMatrix::from_fn(points.len(), 3, |i, j| match j {
        0 => 1.0,
        1 => points[i][0],
        _ => points[i][1],
    })
}

const EVAL_CHUNK: usize = 2048;

/// Hierarchical TPRS directions for every `df` up to a maximum, built once.
#[derive(Clone, Debug)]
pub struct TprsSpace {
    knots: Vec<[f64; 2]>,
    /// Kernel coefficients of the radial directions, in entry order.
    radial: DMatrix<f64>,
    /// The `df` at which each radial direction enters the basis.
    enters_at: Vec<usize>,
    max_df: usize,
    /// Centre and scale applied to coordinates in the polynomial block.
    centre: [f64; 2],
    scale: f64,
}

impl TprsSpace {
    /// Builds the space from knot locations (distinct points).
    pub fn new(knots: Vec<[f64; 2]>, max_df: usize) -> Result<Self> {
        if max_df < 3 {
            return Err(Error::InvalidDf { df: max_df, reason: "need at least 3".into() });
        }
        if knots.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("locations"));
        }
        if max_df > knots.len() {
            return Err(Error::InvalidDf {
                df: max_df,
                reason: format!("exceeds the {} distinct locations", knots.len()),
            });
        }
        let nk = knots.len() as f64;
        let centre = [
            knots.iter().map(|p| p[0]).sum::<f64>() / nk,
            knots.iter().map(|p| p[1]).sum::<f64>() / nk,
        ];
        let scale = knots
            .iter()
            .map(|p| (p[0] - centre[0]).abs().max((p[1] - centre[1]).abs()))
            .fold(0.0, f64::max);
        if !(scale > 0.0) {
            return Err(Error::DegenerateLocations("all locations coincide".into()));
        }
        let mut space = Self { knots, radial: DMatrix::zeros(0, 0), enters_at: vec![], max_df, centre, scale };
        let t = space.polynomial(&space.knots);
        let (_, kept) = linalg::guarded_orthonormalize(&t);
        if kept.len() < 3 {
            return Err(Error::DegenerateLocations("locations are collinear".into()));
        }

        let e = kernel_matrix(&space.knots, &space.knots);
        let (_, u) = linalg::top_eigen(&e, max_df)?;
        // Row space of A_j = T' U_j restricted to the first j coordinates:
        // a new radial direction enters whenever e_j leaves that row space.
        let a_full = t.transpose() * &u; // 3 x max_df
        let mut coefs: Vec<DVector<f64>> = Vec::new();
        let mut enters_at = Vec::new();
        for j in 0..max_df {
            let a = a_full.columns(0, j + 1).transpose(); // (j+1) x 3
            let (r, _) = linalg::guarded_orthonormalize(&a);
            let mut v = DVector::zeros(j + 1);
            v[j] = 1.0;
            let proj = &r * (r.transpose() * &v);
            let v = v - proj;
            let norm = v.norm();
            if norm < 1e-8 {
                continue;
            }
            let v = v / norm;
            coefs.push(u.columns(0, j + 1) * v);
            enters_at.push(j + 1);
        }
        if coefs.len() != max_df - 3 {
            return Err(Error::DegenerateLocations(format!(
                "constraint absorbed {} directions instead of 3",
                max_df - coefs.len()
            )));
        }
        space.radial = if coefs.is_empty() {
            DMatrix::zeros(space.knots.len(), 0)
        } else {
            DMatrix::from_columns(&coefs)
        };
        space.enters_at = enters_at;
        Ok(space)
    }

    /// Builds the space at arbitrary locations, deduplicating and thinning to
    /// [`MAX_KNOTS`] knots with a fixed-seed uniform subsample when needed.
    pub fn at_locations(locations: &[[f64; 2]], max_df: usize) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        let mut unique: Vec<[f64; 2]> = locations
            .iter()
            .copied()
            .filter(|p| seen.insert((p[0].to_bits(), p[1].to_bits())))
            .collect();
        if unique.len() > MAX_KNOTS {
            let mut rng = ChaCha8Rng::seed_from_u64(KNOT_SEED);
            let mut idx = rand::seq::index::sample(&mut rng, unique.len(), MAX_KNOTS).into_vec();
            idx.sort_unstable();
            unique = idx.into_iter().map(|i| unique[i]).collect();
        }
        Self::new(unique, max_df)
    }

    pub fn knots(&self) -> &[[f64; 2]] {
        &self.knots
    }

    pub fn max_df(&self) -> usize {
        self.max_df
    }

    fn polynomial(&self, points: &[[f64; 2]]) -> DMatrix<f64> {
        let centred: Vec<[f64; 2]> = points
            .iter()
            .map(|p| [(p[0] - self.centre[0]) / self.scale, (p[1] - self.centre[1]) / self.scale])
            .collect();
        polynomial_block(&centred)
    }

    /// Raw (non-orthonormal) basis columns for `df` at `points`: the three
    /// polynomial columns followed by `df - 3` radial columns.
    pub fn evaluate(&self, points: &[[f64; 2]], df: usize) -> Result<DMatrix<f64>> {
        if df < 3 || df > self.max_df {
            return Err(Error::InvalidDf { df, reason: format!("space built for 3..={}", self.max_df) });
        }
        let r = self.enters_at.iter().take_while(|&&e| e <= df).count();
        let coef = self.radial.columns(0, r);
        let mut out = DMatrix::zeros(points.len(), 3 + r);
        out.columns_mut(0, 3).copy_from(&self.polynomial(points));
        // Kernel rows in chunks so large point sets never hold the full
        // points x knots kernel in memory.
        for (c, chunk) in points.chunks(EVAL_CHUNK).enumerate() {
            let k = kernel_matrix(chunk, &self.knots);
            out.view_mut((c * EVAL_CHUNK, 3), (chunk.len(), r)).copy_from(&(k * coef));
        }
        Ok(out)
    }

    /// Orthonormal basis at `points` whose first `df` columns span the
    /// `df`-dimensional TPRS space, for every `df` up to `max_df`.
    pub fn nested_basis(&self, points: &[[f64; 2]]) -> Result<DMatrix<f64>> {
        let raw = self.evaluate(points, self.max_df)?;
        linalg::orthonormalize(&raw)
    }

    /// Orthonormalised `df`-column basis at `points`.
    pub fn basis(&self, points: &[[f64; 2]], df: usize) -> Result<BasisMatrix> {
        let raw = self.evaluate(points, df)?;
        let q = linalg::orthonormalize(&raw)?;
        BasisMatrix::new(q, BasisOrdering::TprsDf, BasisMeta::Tprs { df })
    }
}

/// TPRS basis with `df` degrees of freedom at `locations`.
///
/// Repeated locations share one knot; their rows are replicated, so the
/// returned columns are orthonormal over the distinct locations only.
pub fn tprs_basis(locations: &[[f64; 2]], df: usize) -> Result<BasisMatrix> {
    let mut lookup = std::collections::HashMap::new();
    let mut unique: Vec<[f64; 2]> = Vec::new();
    let ids: Vec<usize> = locations
        .iter()
        .map(|p| {
            *lookup.entry((p[0].to_bits(), p[1].to_bits())).or_insert_with(|| {
                unique.push(*p);
                unique.len() - 1
            })
        })
        .collect();
    let mult = dedupe_cells(&ids);
    if df > unique.len() {
        return Err(Error::InvalidDf { df, reason: format!("exceeds the {} distinct locations", unique.len()) });
    }
    let space = TprsSpace::at_locations(&unique, df)?;
    let basis = space.basis(&unique, df)?;
    if mult.counts.iter().all(|&c| c == 1) {
        Ok(basis)
    } else {
        Ok(basis.select_rows(&mult.subject_to_unique))
    }
}

/// TPRS basis for grid cells (possibly repeated), evaluated per subject.
pub fn tprs_basis_for_cells(grid: &Grid, cells: &[usize], df: usize) -> Result<BasisMatrix> {
    let mult = dedupe_cells(cells);
    let coords = grid.coords_of(&mult.unique_locations);
    let space = TprsSpace::at_locations(&coords, df)?;
    Ok(space.basis(&coords, df)?.select_rows(&mult.subject_to_unique))
}
