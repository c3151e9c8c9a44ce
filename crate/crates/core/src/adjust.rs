//! Adjustment paths: the exposure estimate across a grid of adjustment
//! amounts for one basis type.
//!
//! TPRS paths reuse one nested basis whose first `df` columns span the
//! `df`-dimensional space. Residualising `x` and `y` on that basis one
//! column at a time gives every outcome-model fit along the path by the
//! Frisch-Waugh-Lovell identity, at O(n) cost per extra column.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bandwidth::{effective_bandwidth_filter, effective_bandwidth_wavelet};
use crate::error::{Error, Result};
use crate::grid::{dedupe_cells, Cohort, Field, Grid, LocationMultiplicity};
use crate::inference::{self, fit_preadjusted, Estimate, FitResult};
use crate::linalg;
use crate::spectral::{highpass_with, FrequencyFilter};
use crate::tprs::TprsSpace;
use crate::wavelet::{self, Boundary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    /// TPRS columns added to the outcome model.
    Tprs,
    /// Exposure split by projection onto TPRS columns.
    TprsPreadjust,
    Fourier,
    Wavelet,
}

impl BasisKind {
    pub fn name(self) -> &'static str {
        match self {
            BasisKind::Tprs => "tprs",
            BasisKind::TprsPreadjust => "tprs_preadjust",
            BasisKind::Fourier => "fourier",
            BasisKind::Wavelet => "wavelet",
        }
    }

    /// Whether a no-exposure model is defined for this kind of path.
    pub fn has_no_exposure_model(self) -> bool {
        matches!(self, BasisKind::Tprs | BasisKind::TprsPreadjust)
    }
}

/// Likelihood summary of one fitted mean model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    pub log_likelihood: f64,
    pub n: usize,
    /// Mean parameters, including components removed before fitting.
    pub p: usize,
}

impl ModelFit {
    pub fn aic(&self) -> f64 {
        inference::aic(self.log_likelihood, self.p)
    }

    pub fn bic(&self) -> f64 {
        inference::bic(self.log_likelihood, self.p, self.n)
    }
}

impl From<&FitResult> for ModelFit {
    fn from(fit: &FitResult) -> Self {
        Self { log_likelihood: fit.log_likelihood(), n: fit.n(), p: fit.p() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathEntry {
    pub tuning: f64,
    pub estimate: Estimate,
    pub full: ModelFit,
    pub no_exposure: Option<ModelFit>,
}

/// Estimates over strictly increasing tuning values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentPath {
    kind: BasisKind,
    entries: Vec<PathEntry>,
}

impl AdjustmentPath {
    pub fn new(kind: BasisKind, entries: Vec<PathEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Path("path has no entries".into()));
        }
        if let Some(w) = entries.windows(2).find(|w| !(w[0].tuning < w[1].tuning)) {
            return Err(Error::Path(format!(
                "tuning values must increase strictly ({} then {})",
                w[0].tuning, w[1].tuning
            )));
        }
        Ok(Self { kind, entries })
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn entries(&self) -> &[PathEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tunings(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.tuning).collect()
    }

    pub fn position(&self, tuning: f64) -> Option<usize> {
        self.entries.iter().position(|e| e.tuning == tuning)
    }

    /// Attaches bandwidths, one per entry.
    pub fn set_k_hats(&mut self, k_hats: &[Option<f64>]) -> Result<()> {
        if k_hats.len() != self.entries.len() {
            return Err(Error::DimensionMismatch { expected: self.entries.len(), found: k_hats.len() });
        }
        for (e, k) in self.entries.iter_mut().zip(k_hats) {
            e.estimate.k_hat = *k;
        }
        Ok(())
    }

    /// Rows `basis,m,k_hat,beta,se,ci_lo,ci_hi`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(ESTIMATE_HEADER)?;
        for e in &self.entries {
            w.write_record(estimate_record(self.kind, &e.estimate))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const ESTIMATE_HEADER: [&str; 7] = ["basis", "m", "k_hat", "beta", "se", "ci_lo", "ci_hi"];

pub fn format_k_hat(k: Option<f64>) -> String {
    k.map_or_else(|| "undefined".to_string(), |v| v.to_string())
}

pub fn estimate_record(kind: BasisKind, e: &Estimate) -> [String; 7] {
    [
        kind.name().to_string(),
        e.tuning.to_string(),
        format_k_hat(e.k_hat),
        e.beta_hat.to_string(),
        e.se_sandwich.to_string(),
        e.ci95.0.to_string(),
        e.ci95.1.to_string(),
    ]
}

fn sorted_unique<T: PartialOrd + Copy>(values: &[T]) -> Vec<T> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("tuning values are comparable"));
    v.dedup_by(|a, b| a == b);
    v
}

/// Nested TPRS columns at the distinct locations of a cohort.
#[derive(Clone, Debug)]
pub struct NestedBasis {
    /// Orthonormal over the distinct locations; prefix `df` spans the
    /// `df`-column TPRS space.
    unique: DMatrix<f64>,
    multiplicity: LocationMultiplicity,
}

impl NestedBasis {
    /// Builds the TPRS space on the distinct cells themselves.
    pub fn tprs_for_cells(grid: &Grid, cells: &[usize], max_df: usize) -> Result<Self> {
        let multiplicity = dedupe_cells(cells);
        let coords = grid.coords_of(&multiplicity.unique_locations);
        let space = TprsSpace::at_locations(&coords, max_df)?;
        let unique = space.nested_basis(&coords)?;
        Ok(Self { unique, multiplicity })
    }

    /// Takes the rows of a basis evaluated on every grid cell (columns in
    /// nested order) and re-orthonormalises them over the distinct cells.
    pub fn from_grid_rows(grid_basis: &DMatrix<f64>, cells: &[usize]) -> Result<Self> {
        let multiplicity = dedupe_cells(cells);
        let mut rows = grid_basis.select_rows(&multiplicity.unique_locations);
        for mut c in rows.column_iter_mut() {
            let norm = c.norm();
            if norm > 0.0 {
                c /= norm;
            }
        }
        let unique = linalg::orthonormalize(&rows)?;
        Ok(Self { unique, multiplicity })
    }

    pub fn max_df(&self) -> usize {
        self.unique.ncols()
    }

    pub fn multiplicity(&self) -> &LocationMultiplicity {
        &self.multiplicity
    }

    /// Orthonormal columns at the distinct locations.
    pub fn unique_columns(&self) -> &DMatrix<f64> {
        &self.unique
    }

    /// Basis rows for each subject (repeats rows of shared locations).
    pub fn subject_rows(&self) -> DMatrix<f64> {
        self.unique.select_rows(&self.multiplicity.subject_to_unique)
    }

    fn check(&self, cohort: &Cohort, dfs: &[usize]) -> Result<Vec<usize>> {
        if self.multiplicity.subject_to_unique.len() != cohort.len() {
            return Err(Error::DimensionMismatch {
                expected: cohort.len(),
                found: self.multiplicity.subject_to_unique.len(),
            });
        }
        let dfs = sorted_unique(dfs);
        if let Some(&bad) = dfs.iter().find(|&&d| d < 3 || d > self.max_df()) {
            return Err(Error::InvalidDf { df: bad, reason: format!("path basis supports 3..={}", self.max_df()) });
        }
        if dfs.is_empty() {
            return Err(Error::Path("empty df grid".into()));
        }
        Ok(dfs)
    }
}

/// Running residuals of weighted `x` and `y` as orthonormal columns are
/// removed one at a time.
struct Residualizer {
    x: DVector<f64>,
    y: DVector<f64>,
    x_scale: f64,
    n: usize,
    sum_log_w: f64,
    /// Columns absorbed so far (intercept, z, basis).
    absorbed: usize,
}

impl Residualizer {
    fn new(cohort: &Cohort) -> Self {
        let sw: Vec<f64> = match cohort.weights() {
            Some(w) => w.iter().map(|v| v.sqrt()).collect(),
            None => vec![1.0; cohort.len()],
        };
        let x = DVector::from_iterator(cohort.len(), cohort.x().iter().zip(&sw).map(|(a, s)| a * s));
        let y = DVector::from_iterator(cohort.len(), cohort.y().iter().zip(&sw).map(|(a, s)| a * s));
        let sum_log_w = cohort.weights().map_or(0.0, |w| w.iter().map(|v| v.ln()).sum());
        Self { x_scale: x.norm(), x, y, n: cohort.len(), sum_log_w, absorbed: 0 }
    }

    fn absorb(&mut self, q: &DVector<f64>) {
        let (a, b) = (q.dot(&self.x), q.dot(&self.y));
        self.x.axpy(-a, q, 1.0);
        self.y.axpy(-b, q, 1.0);
        self.absorbed += 1;
    }

    fn no_exposure(&self) -> ModelFit {
        let rss = self.y.norm_squared();
        ModelFit { log_likelihood: inference::gaussian_loglik(rss, self.n, self.sum_log_w), n: self.n, p: self.absorbed }
    }

    /// Exposure coefficient with its sandwich variance, and the full model.
    fn exposure(&self) -> Result<(f64, f64, ModelFit)> {
        let xx = self.x.norm_squared();
        if xx.sqrt() <= 1e-8 * self.x_scale {
            log::warn!("exposure lies in the span of the adjustment basis");
            return Err(Error::RankDeficient { rank: self.absorbed, cols: self.absorbed + 1 });
        }
        let beta = self.x.dot(&self.y) / xx;
        let mut rss = 0.0;
        let mut meat = 0.0;
        for (xi, yi) in self.x.iter().zip(self.y.iter()) {
            let r = yi - beta * xi;
            rss += r * r;
            meat += xi * xi * r * r;
        }
        let fit = ModelFit {
            log_likelihood: inference::gaussian_loglik(rss, self.n, self.sum_log_w),
            n: self.n,
            p: self.absorbed + 1,
        };
        Ok((beta, meat / (xx * xx), fit))
    }
}

/// Weighted orthonormal basis of `[1, z]` followed by the nested basis
/// columns, dropping dependent ones. Returns the columns and, per basis
/// column, how many columns are absorbed once it has entered.
fn weighted_design(cohort: &Cohort, basis: &NestedBasis) -> (Vec<DVector<f64>>, Vec<usize>, usize) {
    let n = cohort.len();
    let sw: Vec<f64> = match cohort.weights() {
        Some(w) => w.iter().map(|v| v.sqrt()).collect(),
        None => vec![1.0; n],
    };
    let p = cohort.p();
    let h = basis.subject_rows();
    let mut raw = DMatrix::zeros(n, 1 + p + h.ncols());
    raw.column_mut(0).fill(1.0);
    if let Some(z) = cohort.z() {
        raw.columns_mut(1, p).copy_from(z);
    }
    raw.columns_mut(1 + p, h.ncols()).copy_from(&h);
    for (i, mut row) in raw.row_iter_mut().enumerate() {
        row *= sw[i];
    }
    let (q, kept) = linalg::guarded_orthonormalize(&raw);
    let lead = kept.iter().filter(|&&c| c < 1 + p).count();
    let mut count_after = Vec::with_capacity(h.ncols());
    let mut seen = lead;
    let mut it = kept.iter().skip(lead).peekable();
    for j in 0..h.ncols() {
        if it.peek() == Some(&&(1 + p + j)) {
            it.next();
            seen += 1;
        }
        count_after.push(seen);
    }
    let cols = q.column_iter().map(|c| c.into_owned()).collect();
    (cols, count_after, lead)
}

/// Outcome-model path over `dfs`: `y ~ 1 + x + z + H_df` for each `df`.
pub fn tprs_outcome_path(cohort: &Cohort, basis: &NestedBasis, dfs: &[usize]) -> Result<AdjustmentPath> {
    let dfs = basis.check(cohort, dfs)?;
    let (cols, count_after, lead) = weighted_design(cohort, basis);
    let mut res = Residualizer::new(cohort);
    let mut next = 0usize;
    let mut entries = Vec::with_capacity(dfs.len());
    for &df in &dfs {
        let target = count_after[df - 1];
        while res.absorbed < target.max(lead) {
            res.absorb(&cols[next]);
            next += 1;
        }
        let (beta, var, full) = res.exposure()?;
        let estimate = Estimate::new(beta, var.sqrt(), df as f64, None);
        entries.push(PathEntry { tuning: df as f64, estimate, full, no_exposure: Some(res.no_exposure()) });
    }
    AdjustmentPath::new(BasisKind::Tprs, entries)
}

/// Pre-adjustment path over `dfs`: `x` at the distinct locations is split
/// by projection onto the first `df` columns, expanded back to subjects,
/// and `y ~ 1 + x1 + x2 + z` is fitted. The projection is unweighted over
/// distinct locations, so with inverse-count weights `x2` is exactly
/// weighted-orthogonal to the basis at the subject level.
pub fn tprs_preadjust_path(cohort: &Cohort, basis: &NestedBasis, dfs: &[usize]) -> Result<AdjustmentPath> {
    let dfs = basis.check(cohort, dfs)?;
    let mult = basis.multiplicity();
    let mut x_unique = vec![f64::NAN; mult.unique_locations.len()];
    for (i, &u) in mult.subject_to_unique.iter().enumerate() {
        if x_unique[u].is_nan() {
            x_unique[u] = cohort.x()[i];
        } else if x_unique[u] != cohort.x()[i] {
            return Err(Error::InvalidConfig("exposure differs between subjects sharing a location".into()));
        }
    }
    let (cols, count_after, lead) = weighted_design(cohort, basis);
    let mut ne = Residualizer::new(cohort);
    let mut next_ne = 0usize;

    let xu = DVector::from_vec(x_unique);
    let h = basis.unique_columns();
    let mut x1u = DVector::zeros(xu.len());
    let mut used = 0usize;
    let mut entries = Vec::with_capacity(dfs.len());
    for &df in &dfs {
        while used < df {
            let c = h.column(used);
            x1u.axpy(c.dot(&xu), &c, 1.0);
            used += 1;
        }
        let x2u = &xu - &x1u;
        let x1 = mult.expand(x1u.as_slice());
        let x2 = mult.expand(x2u.as_slice());
        let (mut estimate, fit) = fit_preadjusted(cohort, &x1, &x2, None)?;
        estimate.tuning = df as f64;
        let full = ModelFit::from(&fit.with_extra_params(df));

        let target = count_after[df - 1];
        while ne.absorbed < target.max(lead) {
            ne.absorb(&cols[next_ne]);
            next_ne += 1;
        }
        entries.push(PathEntry { tuning: df as f64, estimate, full, no_exposure: Some(ne.no_exposure()) });
    }
    AdjustmentPath::new(BasisKind::TprsPreadjust, entries)
}

/// One pre-adjusted fit with `x2` supplied per subject.
pub fn preadjust_entry(cohort: &Cohort, x2: &[f64], tuning: f64, k_hat: Option<f64>, extra: usize) -> Result<PathEntry> {
    if x2.len() != cohort.len() {
        return Err(Error::DimensionMismatch { expected: cohort.len(), found: x2.len() });
    }
    let x1: Vec<f64> = cohort.x().iter().zip(x2).map(|(x, b)| x - b).collect();
    let (mut estimate, fit) = fit_preadjusted(cohort, &x1, x2, None)?;
    estimate.tuning = tuning;
    estimate.k_hat = k_hat;
    Ok(PathEntry { tuning, estimate, full: ModelFit::from(&fit.with_extra_params(extra)), no_exposure: None })
}

/// High-passed exposure fields for each cutoff, with bandwidth and the
/// number of removed components.
pub struct FilteredField {
    pub tuning: f64,
    pub values: Field,
    pub k_hat: Option<f64>,
    pub removed: usize,
}

pub fn fourier_fields(field: &Field, cutoffs: &[f64]) -> Result<Vec<FilteredField>> {
    sorted_unique(cutoffs)
        .into_iter()
        .map(|w| {
            let filter = FrequencyFilter::new(w, field.grid())?;
            Ok(FilteredField {
                tuning: w,
                values: highpass_with(field, &filter)?,
                k_hat: effective_bandwidth_filter(w, field.grid())?.k_hat,
                removed: filter.removed_count(),
            })
        })
        .collect()
}

/// Wavelet pre-adjusted fields on the original grid. Non-dyadic fields are
/// embedded first; bandwidths are in domain units of the embedding.
pub fn wavelet_fields(field: &Field, levels: &[usize], family: usize) -> Result<Vec<FilteredField>> {
    let embedded = field.embed_dyadic(0.0);
    let side = embedded.grid().m();
    let span = side as f64 * field.grid().spacing_u().max(field.grid().spacing_v());
    sorted_unique(levels)
        .into_iter()
        .map(|level| {
            let x2 = wavelet::wavelet_preadjust(&embedded, level, family, Boundary::Periodic)?;
            Ok(FilteredField {
                tuning: level as f64,
                values: x2.crop(field.grid(), field.mask())?,
                k_hat: effective_bandwidth_wavelet(level).k_hat.map(|k| k * span),
                removed: wavelet::removed_count(level),
            })
        })
        .collect()
}

/// Path from pre-computed filtered fields sampled at the cohort's cells.
pub fn filtered_path(kind: BasisKind, cohort: &Cohort, fields: &[FilteredField]) -> Result<AdjustmentPath> {
    let entries = fields
        .iter()
        .map(|f| {
            let x2: Vec<f64> = cohort.location_index().iter().map(|&s| f.values.values()[s]).collect();
            preadjust_entry(cohort, &x2, f.tuning, f.k_hat, f.removed)
        })
        .collect::<Result<Vec<_>>>()?;
    AdjustmentPath::new(kind, entries)
}

pub fn fourier_path(field: &Field, cohort: &Cohort, cutoffs: &[f64]) -> Result<AdjustmentPath> {
    filtered_path(BasisKind::Fourier, cohort, &fourier_fields(field, cutoffs)?)
}

pub fn wavelet_path(field: &Field, cohort: &Cohort, levels: &[usize], family: usize) -> Result<AdjustmentPath> {
    filtered_path(BasisKind::Wavelet, cohort, &wavelet_fields(field, levels, family)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{fit_no_exposure, fit_outcome_adjusted};
    use crate::tprs::{BasisMatrix, BasisMeta, BasisOrdering};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn synthetic(grid: &Grid, cells: Vec<usize>, seed: u64, with_z: bool, weights: Option<Vec<f64>>) -> Cohort {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cells.len();
        let coords = grid.coords_of(&cells);
        let x: Vec<f64> = coords.iter().map(|c| (4.0 * c[0]).sin() + c[1] + 0.3 * (17.0 * c[0] * c[1]).cos()).collect();
        let z = with_z.then(|| DMatrix::from_fn(n, 1, |_, _| StandardNormal.sample(&mut rng)));
        let y = (0..n)
            .map(|i| {
                let e: f64 = StandardNormal.sample(&mut rng);
                2.0 * x[i] + (3.0 * coords[i][1]).cos() + z.as_ref().map_or(0.0, |z| 0.5 * z[(i, 0)]) + e
            })
            .collect();
        Cohort::new(grid, cells, y, x, z, weights).unwrap()
    }

    #[test]
    fn nested_path_matches_direct_fits() {
        let g = Grid::unit_square(15, 15).unwrap();
        let mut cells: Vec<usize> = (0..120).map(|i| (i * 37) % 225).collect();
        cells.extend([3, 3, 40]);
        let n = cells.len();
        let mult = dedupe_cells(&cells);
        let w: Vec<f64> = mult.subject_to_unique.iter().map(|&u| 1.0 / mult.counts[u] as f64).collect();
        for (with_z, weights) in [(false, None), (true, Some(w))] {
            let c = synthetic(&g, cells.clone(), 1, with_z, weights);
            let nb = NestedBasis::tprs_for_cells(&g, &cells, 20).unwrap();
            let dfs = [3, 5, 10, 20];
            let path = tprs_outcome_path(&c, &nb, &dfs).unwrap();
            for (e, &df) in path.entries().iter().zip(&dfs) {
                let h = nb.subject_rows().columns(0, df).into_owned();
                let b = BasisMatrix::new(h, BasisOrdering::TprsDf, BasisMeta::Tprs { df }).unwrap();
                let (est, fit) = fit_outcome_adjusted(&c, Some(&b)).unwrap();
                assert!((e.estimate.beta_hat - est.beta_hat).abs() < 1e-9, "df {df}");
                assert!((e.estimate.se_sandwich - est.se_sandwich).abs() < 1e-9);
                assert!((e.full.log_likelihood - fit.log_likelihood()).abs() < 1e-8);
                assert_eq!(e.full.p, fit.p());
                let ne = fit_no_exposure(&c, Some(&b)).unwrap();
                let got = e.no_exposure.unwrap();
                assert!((got.log_likelihood - ne.log_likelihood()).abs() < 1e-8);
                assert_eq!(got.p, ne.p());
            }
            assert_eq!(path.len(), 4);
            let _ = n;
        }
    }

    #[test]
    fn preadjust_and_outcome_agree_without_covariates() {
        let g = Grid::unit_square(14, 14).unwrap();
        let cells: Vec<usize> = (0..150).map(|i| (i * 13) % 196).collect();
        let c = synthetic(&g, cells.clone(), 2, false, None);
        let nb = NestedBasis::tprs_for_cells(&g, &cells, 30).unwrap();
        let a = tprs_outcome_path(&c, &nb, &[6, 15, 30]).unwrap();
        let b = tprs_preadjust_path(&c, &nb, &[6, 15, 30]).unwrap();
        for (ea, eb) in a.entries().iter().zip(b.entries()) {
            assert!((ea.estimate.beta_hat - eb.estimate.beta_hat).abs() < 1e-8);
        }
    }

    #[test]
    fn duplicate_locations_give_weighted_orthogonality() {
        let g = Grid::unit_square(10, 10).unwrap();
        let cells: Vec<usize> = (0..80).map(|i| (i * i + 3 * i) % 100).collect();
        let mult = dedupe_cells(&cells);
        let nb = NestedBasis::tprs_for_cells(&g, &cells, 12).unwrap();
        let c = synthetic(&g, cells, 3, false, None);
        let xu: Vec<f64> = mult.unique_locations.iter().map(|&s| {
            let i = c.location_index().iter().position(|&t| t == s).unwrap();
            c.x()[i]
        }).collect();
        let h = nb.unique_columns().columns(0, 12).into_owned();
        let xv = DVector::from_vec(xu);
        let x2u = &xv - &h * (h.transpose() * &xv);
        let x2 = mult.expand(x2u.as_slice());
        let hs = nb.subject_rows();
        for j in 0..12 {
            let s: f64 = (0..c.len())
                .map(|i| x2[i] * hs[(i, j)] / mult.counts[mult.subject_to_unique[i]] as f64)
                .sum();
            assert!(s.abs() < 1e-10, "column {j}: {s}");
        }
    }

    #[test]
    fn grid_rows_basis_spans_the_same_space() {
        let g = Grid::unit_square(12, 12).unwrap();
        let space = TprsSpace::at_locations(&g.all_coords(), 10).unwrap();
        let raw = space.evaluate(&g.all_coords(), 10).unwrap();
        let cells: Vec<usize> = (0..60).map(|i| i * 2).collect();
        let nb = NestedBasis::from_grid_rows(&raw, &cells).unwrap();
        let direct = linalg::orthonormalize(&raw.select_rows(&cells)).unwrap();
        for df in [3, 7, 10] {
            let a = nb.unique_columns().columns(0, df);
            let b = direct.columns(0, df);
            let sv = (a.transpose() * b).singular_values();
            assert!(sv.iter().all(|s| (s - 1.0).abs() < 1e-8));
        }
    }

    #[test]
    fn filtered_paths_report_bandwidth_and_extra_params() {
        let g = Grid::unit_square(32, 32).unwrap();
        let field = Field::from_fn(g.clone(), |u, v| (7.0 * u).sin() + (23.0 * v * u).cos()).unwrap();
        let cells: Vec<usize> = (0..300).map(|i| (i * 7) % 1024).collect();
        let x: Vec<f64> = cells.iter().map(|&s| field.values()[s]).collect();
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + (i % 5) as f64 * 0.1).collect();
        let c = Cohort::new(&g, cells, y, x, None, None).unwrap();
        let fp = fourier_path(&field, &c, &[3.0, 1.0, 2.0, 6.3]).unwrap();
        assert_eq!(fp.tunings(), vec![1.0, 2.0, 3.0, 6.3]);
        assert_eq!(fp.entries()[0].estimate.k_hat, None);
        let filter = FrequencyFilter::new(3.0, &g).unwrap();
        let plain = preadjust_entry(&c, &vec![0.0; 300], 0.0, None, 0);
        assert!(plain.is_err());
        assert_eq!(fp.entries()[2].full.p, 3 + filter.removed_count());
        let wp = wavelet_path(&field, &c, &[0, 1, 2], 4).unwrap();
        assert_eq!(wp.entries()[2].estimate.k_hat, Some(0.25));
        assert_eq!(wp.entries()[1].full.p, 3 + 16);
        let mut buf = Vec::new();
        fp.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("basis,m,k_hat,beta,se,ci_lo,ci_hi\nfourier,1,undefined,"));
    }

    #[test]
    fn path_rejects_unordered_tunings() {
        let e = PathEntry {
            tuning: 2.0,
            estimate: Estimate::new(1.0, 0.1, 2.0, None),
            full: ModelFit { log_likelihood: 0.0, n: 10, p: 2 },
            no_exposure: None,
        };
        let mut f = e.clone();
        f.tuning = 1.0;
        assert!(AdjustmentPath::new(BasisKind::Tprs, vec![e, f]).is_err());
        assert!(AdjustmentPath::new(BasisKind::Tprs, vec![]).is_err());
    }
}
