//! Monte Carlo harness: fixed confounder and exposure surfaces, calibrated
//! confounding strength, and replicated fits of every estimator.
//!
//! Each replication draws its own locations and noise from a ChaCha stream
//! selected by the replication index, so results do not depend on thread
//! scheduling.

use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjust::{
    filtered_path, fourier_fields, tprs_outcome_path, tprs_preadjust_path, wavelet_fields, AdjustmentPath,
    BasisKind, FilteredField, NestedBasis,
};
use crate::error::{Error, Result};
use crate::grid::{sample_locations, Cohort, Field, Grid, SamplingScheme};
use crate::inference::{fit_outcome_adjusted, Estimate};
use crate::linalg;
use crate::selection::{select, Rule};
use crate::spectral::fft2;
use crate::tprs::TprsSpace;
use crate::wavelet::DEFAULT_FAMILY;

/// Side of the knot lattice defining the TPRS confounders.
pub const CONFOUNDER_KNOT_SIDE: usize = 16;
/// Knots of the TPRS basis used by the simulated estimators.
pub const SIMULATION_KNOTS: usize = 2000;
const SIMULATION_KNOT_SEED: u64 = 0x6b6e_6f74;
const MAX_PADDING: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfounderKind {
    F1,
    F2,
    F3,
    F4,
    F5,
    F6,
}

impl ConfounderKind {
    pub const ALL: [ConfounderKind; 6] =
        [ConfounderKind::F1, ConfounderKind::F2, ConfounderKind::F3, ConfounderKind::F4, ConfounderKind::F5, ConfounderKind::F6];

    pub fn name(self) -> &'static str {
        match self {
            ConfounderKind::F1 => "f1",
            ConfounderKind::F2 => "f2",
            ConfounderKind::F3 => "f3",
            ConfounderKind::F4 => "f4",
            ConfounderKind::F5 => "f5",
            ConfounderKind::F6 => "f6",
        }
    }

    /// Seed that fixes this surface across runs.
    pub fn default_seed(self) -> u64 {
        0xc0f0_0000 + self as u64
    }

    /// Human-readable description of the surface's scale of variation.
    pub fn describe(self) -> &'static str {
        match self {
            ConfounderKind::F1 => "TPRS with 10 df",
            ConfounderKind::F2 => "TPRS with 50 df",
            ConfounderKind::F3 => "sinusoids with frequency up to sqrt(40)",
            ConfounderKind::F4 => "sinusoids with frequency up to sqrt(500)",
            ConfounderKind::F5 => "exponential GP, range 0.5",
            ConfounderKind::F6 => "exponential GP, range 0.15",
        }
    }
}

/// How the range parameter enters the exponential covariance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeConvention {
    /// `exp(-3 d / range)`: correlation about 0.05 at `d = range`.
    #[default]
    Effective,
    /// `exp(-d / range)`.
    Plain,
}

impl RangeConvention {
    fn rate(self) -> f64 {
        match self {
            RangeConvention::Effective => 3.0,
            RangeConvention::Plain => 1.0,
        }
    }
}

/// Exponential covariance at distance `d`.
pub fn exponential_covariance(d: f64, range: f64, convention: RangeConvention) -> f64 {
    (-convention.rate() * d / range).exp()
}

/// Unstandardised exponential-covariance Gaussian field by circulant
/// embedding on a torus padded to at least twice the grid in each
/// direction.
pub fn gp_exponential_raw(grid: &Grid, range: f64, convention: RangeConvention, seed: u64) -> Result<Field> {
    if !(range > 0.0) || !range.is_finite() {
        return Err(Error::InvalidConfig(format!("GP range must be positive, got {range}")));
    }
    let (m, n) = (grid.m(), grid.n());
    let (mut spectrum, mut p, mut q) = (Vec::new(), 0, 0);
    for pad in 2..=MAX_PADDING {
        (p, q) = (pad * m, pad * n);
        spectrum = embedding_spectrum(grid, p, q, range, convention);
        let max = spectrum.iter().copied().fold(0.0, f64::max);
        let min = spectrum.iter().copied().fold(f64::INFINITY, f64::min);
        if min >= -1e-10 * max {
            break;
        }
        if pad == MAX_PADDING {
            log::warn!("circulant embedding has negative eigenvalues down to {min:e}; clipping to zero");
        }
    }
    let scale = 1.0 / (p * q) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<Complex64> = spectrum
        .iter()
        .map(|&lam| {
            let a = (lam.max(0.0) * scale).sqrt();
            let (re, im): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            Complex64::new(a * re, a * im)
        })
        .collect();
    fft2(&mut data, p, q, false);
    let values = (0..n).flat_map(|r| (0..m).map(move |c| (r, c))).map(|(r, c)| data[r * p + c].re).collect();
    Field::new(grid.clone(), values)
}

fn embedding_spectrum(grid: &Grid, p: usize, q: usize, range: f64, convention: RangeConvention) -> Vec<f64> {
    let mut base: Vec<Complex64> = (0..q)
        .flat_map(|r| (0..p).map(move |c| (r, c)))
        .map(|(r, c)| {
            let du = c.min(p - c) as f64 * grid.spacing_u();
            let dv = r.min(q - r) as f64 * grid.spacing_v();
            Complex64::new(exponential_covariance(du.hypot(dv), range, convention), 0.0)
        })
        .collect();
    fft2(&mut base, p, q, false);
    base.iter().map(|c| c.re).collect()
}

/// Standardised exponential-covariance Gaussian field.
pub fn gp_exponential(grid: &Grid, range: f64, convention: RangeConvention, seed: u64) -> Result<Field> {
    gp_exponential_raw(grid, range, convention, seed)?.standardize()
}

/// Lattice of knots spanning the grid's extent.
fn knot_lattice(grid: &Grid, side: usize) -> Vec<[f64; 2]> {
    let (wu, wv) = grid.extent();
    let lattice = Grid::new(side, side, wu / side as f64, wv / side as f64, grid.origin()).expect("valid lattice");
    lattice.all_coords()
}

/// Orthonormal TPRS columns on every grid cell, defined by the confounder
/// knot lattice; `f1` and `f2` are random combinations of these.
pub fn confounder_basis(grid: &Grid, df: usize) -> Result<DMatrix<f64>> {
    let space = TprsSpace::new(knot_lattice(grid, CONFOUNDER_KNOT_SIDE), df)?;
    space.nested_basis(&grid.all_coords())
}

fn tprs_surface(grid: &Grid, df: usize, seed: u64) -> Result<Field> {
    let h = confounder_basis(grid, df)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Column 0 is the constant; it would vanish under standardisation.
    let coef: Vec<f64> = (1..df).map(|_| StandardNormal.sample(&mut rng)).collect();
    let values = (0..grid.cells()).map(|s| (1..df).map(|j| h[(s, j)] * coef[j - 1]).sum()).collect();
    Field::new(grid.clone(), values)?.standardize()
}

/// Integer frequency pairs in a half plane with `0 < p^2 + q^2 <= max_sq`.
pub fn sinusoid_frequencies(max_sq: i64) -> Vec<(i64, i64)> {
    let r = (max_sq as f64).sqrt().floor() as i64;
    let mut out = Vec::new();
    for p in 0..=r {
        for q in -r..=r {
            if (p > 0 || q > 0) && p * p + q * q <= max_sq {
                out.push((p, q));
            }
        }
    }
    out
}

fn sinusoid_surface(grid: &Grid, max_sq: i64, seed: u64) -> Result<Field> {
    let freqs = sinusoid_frequencies(max_sq);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coef: Vec<(f64, f64)> = freqs.iter().map(|_| (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng))).collect();
    let (wu, wv) = grid.extent();
    let (ou, ov) = grid.origin();
    let tau = std::f64::consts::TAU;
    let f = |u: f64, v: f64| {
        let (a, b) = ((u - ou) / wu, (v - ov) / wv);
        freqs
            .iter()
            .zip(&coef)
            .map(|(&(p, q), &(c, s))| {
                let phase = tau * (p as f64 * a + q as f64 * b);
                c * phase.cos() + s * phase.sin()
            })
            .sum()
    };
    Field::from_fn(grid.clone(), f)?.standardize()
}

/// One of the six fixed confounder surfaces, standardised.
pub fn confounder_surface(kind: ConfounderKind, grid: &Grid, seed: u64) -> Result<Field> {
    match kind {
        ConfounderKind::F1 => tprs_surface(grid, 10, seed),
        ConfounderKind::F2 => tprs_surface(grid, 50, seed),
        ConfounderKind::F3 => sinusoid_surface(grid, 40, seed),
        ConfounderKind::F4 => sinusoid_surface(grid, 500, seed),
        ConfounderKind::F5 => gp_exponential(grid, 0.5, RangeConvention::Effective, seed),
        ConfounderKind::F6 => gp_exponential(grid, 0.15, RangeConvention::Effective, seed),
    }
}

/// Population bias of the unadjusted slope when `x = standardize(theta f + g)`.
pub fn population_bias(g: &Field, f: &Field, theta: f64) -> Result<f64> {
    let mixed: Vec<f64> = g.values().iter().zip(f.values()).map(|(a, b)| theta * b + a).collect();
    let x = g.with_values(mixed)?.standardize()?;
    Ok(x.dot(f) / x.dot(&x))
}

/// Mixing weight giving the requested unadjusted bias. `f` and `g` must be
/// standardised on the same grid; the attainable biases are then `(-1, 1)`.
pub fn calibrate_theta(g: &Field, f: &Field, target_bias: f64) -> Result<f64> {
    if g.grid() != f.grid() {
        return Err(Error::InvalidGrid("confounder and exposure surfaces differ in grid".into()));
    }
    let rho = g.dot(f) / g.dot(g).sqrt() / f.dot(f).sqrt();
    let bias = |t: f64| (t + rho) / (t * t + 2.0 * t * rho + 1.0).sqrt();
    if !(target_bias > -1.0 && target_bias < 1.0) {
        return Err(Error::Unreachable { target: target_bias, lo: -1.0, hi: 1.0 });
    }
    let (mut lo, mut hi) = (-1.0, 1.0);
    while bias(lo) > target_bias {
        lo *= 2.0;
    }
    while bias(hi) < target_bias {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Unreachable { target: target_bias, lo: bias(-f64::MAX), hi: bias(f64::MAX) });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if bias(mid) < target_bias {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let theta = if (bias(lo) - target_bias).abs() <= (bias(hi) - target_bias).abs() { lo } else { hi };
    Ok(theta)
}

/// Which estimators a replication computes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Battery {
    pub unadjusted: bool,
    pub tprs: bool,
    pub tprs_preadjust: bool,
    pub fourier: bool,
    pub wavelet: bool,
    pub tprs_dfs: Vec<usize>,
    pub cutoffs: Vec<f64>,
    /// Defaults to every level that leaves a non-zero exposure, `0..J-1`.
    pub levels: Option<Vec<usize>>,
    pub family: usize,
    pub rules: Vec<Rule>,
    /// Reference tuning value of the MSE rule; the largest on each path if unset.
    pub m_prime: Option<f64>,
}

/// Desk-scale TPRS grid: 3..=20, then 25..=100 by 5.
pub fn default_tprs_dfs() -> Vec<usize> {
    (3..=20).chain((25..=100).step_by(5)).collect()
}

impl Default for Battery {
    fn default() -> Self {
        Self {
            unadjusted: true,
            tprs: true,
            tprs_preadjust: true,
            fourier: true,
            wavelet: true,
            tprs_dfs: default_tprs_dfs(),
            cutoffs: (1..=30).map(f64::from).collect(),
            levels: None,
            family: DEFAULT_FAMILY,
            rules: Rule::ALL.to_vec(),
            m_prime: None,
        }
    }
}

impl Battery {
    pub fn unadjusted_only() -> Self {
        Self { tprs: false, tprs_preadjust: false, fourier: false, wavelet: false, rules: vec![], ..Self::default() }
    }
}

/// Optional measured covariate: a Gaussian surface entering the outcome.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub range: f64,
    pub gamma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationScenario {
    pub grid: [usize; 2],
    pub confounder: ConfounderKind,
    /// Seed of the confounder surface; the kind's fixed seed if unset.
    pub confounder_seed: Option<u64>,
    pub g_range: f64,
    pub range_convention: RangeConvention,
    pub beta: f64,
    pub target_bias: f64,
    pub sigma_eps: f64,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    pub sampling: SamplingScheme,
    pub battery: Battery,
    pub covariate: Option<CovariateSpec>,
}

impl Default for SimulationScenario {
    fn default() -> Self {
        Self {
            grid: [128, 128],
            confounder: ConfounderKind::F1,
            confounder_seed: None,
            g_range: 0.05,
            range_convention: RangeConvention::Effective,
            beta: 1.0,
            target_bias: 0.2,
            sigma_eps: 4.0,
            n: 2000,
            replications: 200,
            seed: 1,
            sampling: SamplingScheme::UniformWithoutReplacement,
            battery: Battery::default(),
            covariate: None,
        }
    }
}

impl SimulationScenario {
    /// Full-size settings: 512 x 512 grid and 1000 replications.
    pub fn paper_scale(mut self) -> Self {
        self.grid = [512, 512];
        self.replications = 1000;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.target_bias >= 0.0) {
            return bad(format!("target_bias must be non-negative, got {}", self.target_bias));
        }
        if !(self.sigma_eps > 0.0) {
            return bad(format!("sigma_eps must be positive, got {}", self.sigma_eps));
        }
        if !(self.g_range > 0.0) {
            return bad(format!("g_range must be positive, got {}", self.g_range));
        }
        if self.replications == 0 || self.n < 3 {
            return bad("need at least one replication and three subjects".into());
        }
        let cells = self.grid[0] * self.grid[1];
        if self.sampling == SamplingScheme::UniformWithoutReplacement && self.n > cells {
            return Err(Error::SampleTooLarge { requested: self.n, available: cells });
        }
        let b = &self.battery;
        if (b.tprs || b.tprs_preadjust) && b.tprs_dfs.iter().any(|&d| d < 3 || d > self.n) {
            return bad("TPRS df values must lie in 3..=n".into());
        }
        if b.fourier && b.cutoffs.iter().any(|c| !(*c >= 0.0)) {
            return bad("Fourier cutoffs must be non-negative".into());
        }
        if !(1..=10).contains(&b.family) {
            return Err(Error::UnsupportedFamily(b.family));
        }
        Ok(())
    }

    pub fn unit_grid(&self) -> Result<Grid> {
        Grid::unit_square(self.grid[0], self.grid[1])
    }
}

/// Identifies an estimator: a method and either a fixed tuning value or a
/// selection rule.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EstimatorKey {
    pub method: String,
    pub tuning: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub key: EstimatorKey,
    pub estimate: Estimate,
    /// Tuning value picked by a selection rule.
    pub chosen: Option<f64>,
}

/// Monte Carlo summary of one estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub key: EstimatorKey,
    pub reps: usize,
    pub mean: f64,
    pub bias: f64,
    /// Standard deviation with divisor `reps - 1`.
    pub sd: f64,
    pub mean_se: f64,
    pub mse: f64,
    pub coverage: f64,
    /// Rejection rate of `beta = 0`; reported when the true effect is 0.
    pub type1_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub confounder: ConfounderKind,
    pub beta: f64,
    pub theta: f64,
    pub estimators: Vec<EstimatorSummary>,
}

impl ReplicationSummary {
    pub fn get(&self, method: &str, tuning: &str) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.key.method == method && e.key.tuning == tuning)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "confounder", "method", "tuning", "reps", "mean", "bias", "sd", "mean_se", "mse", "coverage", "type1_error",
        ])?;
        for e in &self.estimators {
            w.write_record([
                self.confounder.name().to_string(),
                e.key.method.clone(),
                e.key.tuning.clone(),
                e.reps.to_string(),
                e.mean.to_string(),
                e.bias.to_string(),
                e.sd.to_string(),
                e.mean_se.to_string(),
                e.mse.to_string(),
                e.coverage.to_string(),
                e.type1_error.map_or_else(String::new, |v| v.to_string()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_replications_csv<W: Write>(records: &[RepRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["rep", "method", "tuning", "beta", "se", "ci_lo", "ci_hi", "chosen"])?;
    for r in records {
        w.write_record([
            r.rep.to_string(),
            r.key.method.clone(),
            r.key.tuning.clone(),
            r.estimate.beta_hat.to_string(),
            r.estimate.se_sandwich.to_string(),
            r.estimate.ci95.0.to_string(),
            r.estimate.ci95.1.to_string(),
            r.chosen.map_or_else(String::new, |v| v.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Everything shared read-only by the replications.
pub struct Surfaces {
    pub grid: Grid,
    pub f: Field,
    pub g: Field,
    pub x: Field,
    pub z: Option<Field>,
    pub theta: f64,
    tprs_grid_basis: Option<DMatrix<f64>>,
    fourier: Vec<FilteredField>,
    wavelet: Vec<FilteredField>,
}

impl Surfaces {
    pub fn build(s: &SimulationScenario) -> Result<Self> {
        s.validate()?;
        let grid = s.unit_grid()?;
        let f = confounder_surface(s.confounder, &grid, s.confounder_seed.unwrap_or(s.confounder.default_seed()))?;
        let g = gp_exponential(&grid, s.g_range, s.range_convention, s.seed ^ 0x6578_706f)?;
        let theta = calibrate_theta(&g, &f, s.target_bias)?;
        let mixed: Vec<f64> = g.values().iter().zip(f.values()).map(|(a, b)| theta * b + a).collect();
        let x = g.with_values(mixed)?.standardize()?;
        let z = s.covariate.map(|c| gp_exponential(&grid, c.range, s.range_convention, c.seed)).transpose()?;

        let b = &s.battery;
        let tprs_grid_basis = if (b.tprs || b.tprs_preadjust) && !b.tprs_dfs.is_empty() {
            let max_df = *b.tprs_dfs.iter().max().expect("non-empty");
            Some(simulation_tprs_basis(&grid, max_df)?)
        } else {
            None
        };
        let fourier = if b.fourier { fourier_fields(&x, &b.cutoffs)? } else { vec![] };
        let wavelet = if b.wavelet {
            let side = grid.m().max(grid.n()).next_power_of_two();
            let j = side.trailing_zeros() as usize;
            let levels = b.levels.clone().unwrap_or_else(|| (0..j.saturating_sub(1)).collect());
            wavelet_fields(&x, &levels, b.family)?
        } else {
            vec![]
        };
        Ok(Self { grid, f, g, x, z, theta, tprs_grid_basis, fourier, wavelet })
    }
}

/// Raw nested TPRS columns on every grid cell, from a fixed-seed set of
/// grid cells used as knots.
fn simulation_tprs_basis(grid: &Grid, max_df: usize) -> Result<DMatrix<f64>> {
    let cells = grid.cells();
    let mut rng = ChaCha8Rng::seed_from_u64(SIMULATION_KNOT_SEED);
    let mut idx = if cells > SIMULATION_KNOTS {
        rand::seq::index::sample(&mut rng, cells, SIMULATION_KNOTS).into_vec()
    } else {
        (0..cells).collect()
    };
    idx.sort_unstable();
    let space = TprsSpace::new(grid.coords_of(&idx), max_df)?;
    space.evaluate(&grid.all_coords(), max_df)
}

fn key(method: &str, tuning: impl Into<String>) -> EstimatorKey {
    EstimatorKey { method: method.to_string(), tuning: tuning.into() }
}

fn record_path(out: &mut Vec<RepRecord>, rep: usize, path: &AdjustmentPath, battery: &Battery) -> Result<()> {
    let method = path.kind().name();
    for e in path.entries() {
        out.push(RepRecord { rep, key: key(method, e.tuning.to_string()), estimate: e.estimate, chosen: None });
    }
    for &rule in &battery.rules {
        if rule.needs_no_exposure() && !path.kind().has_no_exposure_model() {
            continue;
        }
        if rule == Rule::Knee && path.len() < 4 {
            continue;
        }
        let m_prime = battery.m_prime.filter(|m| path.position(*m).is_some());
        let sel = select(path, rule, m_prime)?;
        out.push(RepRecord {
            rep,
            key: key(method, format!("rule:{}", rule.name())),
            estimate: sel.estimate,
            chosen: Some(sel.tuning),
        });
    }
    Ok(())
}

/// Runs one replication.
pub fn run_replication(s: &SimulationScenario, surf: &Surfaces, rep: usize) -> Result<Vec<RepRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    rng.set_stream(rep as u64);
    let cells = sample_locations(&surf.grid, s.n, s.sampling, &mut rng)?;
    let x: Vec<f64> = cells.iter().map(|&c| surf.x.values()[c]).collect();
    let z = surf.z.as_ref().map(|z| DMatrix::from_fn(s.n, 1, |i, _| z.values()[cells[i]]));
    let gamma = s.covariate.map_or(0.0, |c| c.gamma);
    let y: Vec<f64> = cells
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let eps: f64 = rng.sample::<f64, _>(StandardNormal) * s.sigma_eps;
            let zc = z.as_ref().map_or(0.0, |z| gamma * z[(i, 0)]);
            s.beta * x[i] + surf.f.values()[c] + zc + eps
        })
        .collect();
    let cohort = Cohort::new(&surf.grid, cells.clone(), y, x, z, None)?;

    let b = &s.battery;
    let mut out = Vec::new();
    if b.unadjusted {
        let (e, _) = fit_outcome_adjusted(&cohort, None)?;
        out.push(RepRecord { rep, key: key("unadjusted", "none"), estimate: e, chosen: None });
    }
    if let Some(gb) = &surf.tprs_grid_basis {
        let nested = NestedBasis::from_grid_rows(gb, &cells)?;
        if b.tprs {
            record_path(&mut out, rep, &tprs_outcome_path(&cohort, &nested, &b.tprs_dfs)?, b)?;
        }
        if b.tprs_preadjust {
            record_path(&mut out, rep, &tprs_preadjust_path(&cohort, &nested, &b.tprs_dfs)?, b)?;
        }
    }
    if !surf.fourier.is_empty() {
        record_path(&mut out, rep, &filtered_path(BasisKind::Fourier, &cohort, &surf.fourier)?, b)?;
    }
    if !surf.wavelet.is_empty() {
        record_path(&mut out, rep, &filtered_path(BasisKind::Wavelet, &cohort, &surf.wavelet)?, b)?;
    }
    Ok(out)
}

pub struct SimulationOutput {
    pub records: Vec<RepRecord>,
    pub summary: ReplicationSummary,
}

/// Runs every replication and summarises. Any failed replication aborts
/// the run with its index.
pub fn run_scenario(s: &SimulationScenario) -> Result<SimulationOutput> {
    let surf = Surfaces::build(s)?;
    log::info!("{}: theta = {:.6}", s.confounder.name(), surf.theta);
    let per_rep: Vec<Vec<RepRecord>> = (0..s.replications)
        .into_par_iter()
        .map(|rep| run_replication(s, &surf, rep).map_err(|e| Error::Replication { rep, source: Box::new(e) }))
        .collect::<Result<_>>()?;
    let summary = summarize(s.confounder, s.beta, surf.theta, &per_rep);
    Ok(SimulationOutput { records: per_rep.into_iter().flatten().collect(), summary })
}

fn summarize(confounder: ConfounderKind, beta: f64, theta: f64, per_rep: &[Vec<RepRecord>]) -> ReplicationSummary {
    let keys: Vec<EstimatorKey> = per_rep.first().map(|r| r.iter().map(|x| x.key.clone()).collect()).unwrap_or_default();
    let estimators = keys
        .iter()
        .enumerate()
        .map(|(k, key)| {
            let est: Vec<&Estimate> = per_rep.iter().map(|r| &r[k].estimate).collect();
            debug_assert!(per_rep.iter().all(|r| &r[k].key == key));
            let reps = est.len();
            let rf = reps as f64;
            let mean = est.iter().map(|e| e.beta_hat).sum::<f64>() / rf;
            let ss = est.iter().map(|e| (e.beta_hat - mean).powi(2)).sum::<f64>();
            let sd = if reps > 1 { (ss / (rf - 1.0)).sqrt() } else { 0.0 };
            let mse = est.iter().map(|e| (e.beta_hat - beta).powi(2)).sum::<f64>() / rf;
            let coverage = est.iter().filter(|e| e.covers(beta)).count() as f64 / rf;
            let type1_error = (beta == 0.0).then(|| est.iter().filter(|e| e.rejects_zero()).count() as f64 / rf);
            EstimatorSummary {
                key: key.clone(),
                reps,
                mean,
                bias: mean - beta,
                sd,
                mean_se: est.iter().map(|e| e.se_sandwich).sum::<f64>() / rf,
                mse,
                coverage,
                type1_error,
            }
        })
        .collect();
    ReplicationSummary { confounder, beta, theta, estimators }
}

/// Orthonormal columns spanning the TPRS confounder, for projection checks.
pub fn span_residual(field: &Field, basis: &DMatrix<f64>) -> f64 {
    let q = linalg::guarded_orthonormalize(basis).0;
    let v = nalgebra::DVector::from_column_slice(field.values());
    let r = &v - &q * (q.transpose() * &v);
    r.norm() / v.norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{highpass_preadjust, FrequencyFilter, Spectrum};

    #[test]
    fn gp_is_standardized_and_seed_dependent() {
        let g = Grid::unit_square(32, 32).unwrap();
        let a = gp_exponential(&g, 0.2, RangeConvention::Effective, 1).unwrap();
        let b = gp_exponential(&g, 0.2, RangeConvention::Effective, 2).unwrap();
        assert!(a.mean().abs() < 1e-12);
        assert!((a.variance() - 1.0).abs() < 1e-12);
        let diff: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 0.0);
        assert!(gp_exponential(&g, 0.0, RangeConvention::Effective, 1).is_err());
    }

    #[test]
    fn gp_empirical_covariance_matches_model() {
        // Averaged over 50 seeds on 128 x 128, lags along u.
        let g = Grid::unit_square(128, 128).unwrap();
        let range = 0.15;
        let lags = [6usize, 13, 26];
        let mut acc = [0.0; 3];
        for seed in 0..50 {
            let f = gp_exponential(&g, range, RangeConvention::Effective, seed).unwrap();
            for (k, &lag) in lags.iter().enumerate() {
                let mut s = 0.0;
                let mut count = 0.0;
                for r in 0..128 {
                    for c in 0..128 - lag {
                        s += f.get(c, r) * f.get(c + lag, r);
                        count += 1.0;
                    }
                }
                acc[k] += s / count / 50.0;
            }
        }
        for (k, &lag) in lags.iter().enumerate() {
            let model = exponential_covariance(lag as f64 / 128.0, range, RangeConvention::Effective);
            assert!((acc[k] - model).abs() < 0.05, "lag {lag}: {} vs {model}", acc[k]);
        }
    }

    #[test]
    fn sinusoid_frequency_sets() {
        let f = sinusoid_frequencies(40);
        assert!(f.iter().all(|&(p, q)| p * p + q * q <= 40 && (p > 0 || q > 0) && p >= 0));
        // Half of the non-zero lattice points in the disk of radius sqrt(40).
        let full = (-6i64..=6).flat_map(|p| (-6i64..=6).map(move |q| (p, q))).filter(|&(p, q)| p * p + q * q <= 40).count();
        assert_eq!(f.len(), (full - 1) / 2);
    }

    #[test]
    fn f3_has_no_content_above_seven() {
        let g = Grid::unit_square(64, 64).unwrap();
        let f3 = confounder_surface(ConfounderKind::F3, &g, ConfounderKind::F3.default_seed()).unwrap();
        let hp = highpass_preadjust(&f3, 7.0).unwrap();
        assert!(hp.norm() < 1e-6 * f3.norm());
        assert!((f3.variance() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn f1_lies_in_its_generating_span() {
        let g = Grid::unit_square(40, 40).unwrap();
        let f1 = confounder_surface(ConfounderKind::F1, &g, 3).unwrap();
        let basis = confounder_basis(&g, 10).unwrap();
        assert!(span_residual(&f1, &basis) < 1e-6);
        let basis6 = confounder_basis(&g, 6).unwrap();
        assert!(span_residual(&f1, &basis6) > 1e-3);
    }

    #[test]
    fn f6_has_fine_scale_energy() {
        let g = Grid::unit_square(128, 128).unwrap();
        let f6 = confounder_surface(ConfounderKind::F6, &g, ConfounderKind::F6.default_seed()).unwrap();
        let spec = Spectrum::of_field(&f6);
        let filter = FrequencyFilter::new(7.0, &g).unwrap();
        let total = f6.norm().powi(2);
        let above = total - spec.energy_removed(&filter);
        assert!(above / total > 0.3, "share above 7: {}", above / total);
    }

    #[test]
    fn theta_reproduces_target_bias() {
        let g = Grid::unit_square(32, 32).unwrap();
        let f = confounder_surface(ConfounderKind::F5, &g, 5).unwrap();
        let e = gp_exponential(&g, 0.05, RangeConvention::Effective, 6).unwrap();
        for target in [0.0, 0.2, 0.7, -0.3] {
            let theta = calibrate_theta(&e, &f, target).unwrap();
            assert!((population_bias(&e, &f, theta).unwrap() - target).abs() < 1e-8);
        }
        assert!(matches!(calibrate_theta(&e, &f, 1.2), Err(Error::Unreachable { .. })));
    }

    #[test]
    fn theta_zero_for_orthogonal_surfaces() {
        let g = Grid::unit_square(16, 16).unwrap();
        let tau = std::f64::consts::TAU;
        let f = Field::from_fn(g.clone(), |u, _| (tau * u).cos()).unwrap().standardize().unwrap();
        let e = Field::from_fn(g, |_, v| (tau * v).cos()).unwrap().standardize().unwrap();
        assert!(calibrate_theta(&e, &f, 0.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn scenario_json_round_trip_and_validation() {
        let s = SimulationScenario::default();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(SimulationScenario::from_json(&text).unwrap(), s);
        let partial = SimulationScenario::from_json(r#"{"confounder":"f4","beta":0}"#).unwrap();
        assert_eq!(partial.confounder, ConfounderKind::F4);
        assert_eq!(partial.n, 2000);
        assert!(SimulationScenario::from_json(r#"{"sigma_eps":-1}"#).is_err());
        assert!(SimulationScenario::from_json(r#"{"grid":[10,10]}"#).is_err());
        assert_eq!(s.paper_scale().grid, [512, 512]);
    }

    fn small_scenario() -> SimulationScenario {
        SimulationScenario {
            grid: [32, 32],
            n: 200,
            replications: 6,
            battery: Battery {
                tprs_dfs: vec![3, 5, 8, 10, 15],
                cutoffs: vec![1.0, 3.0, 5.0, 7.0],
                ..Battery::default()
            },
            ..SimulationScenario::default()
        }
    }

    #[test]
    fn replications_are_deterministic_and_summaries_consistent() {
        let s = small_scenario();
        let a = run_scenario(&s).unwrap();
        let b = run_scenario(&s).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        a.summary.write_csv(&mut ca).unwrap();
        b.summary.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        for e in &a.summary.estimators {
            let r = e.reps as f64;
            let identity = e.bias.powi(2) + e.sd.powi(2) * (r - 1.0) / r;
            assert!((e.mse - identity).abs() < 1e-10 * (1.0 + e.mse));
        }
        assert!(a.summary.get("tprs", "10").is_some());
        assert!(a.summary.get("fourier", "rule:knee").is_some());
        assert!(a.summary.get("fourier", "rule:aic-ne").is_none());
        assert!(a.summary.get("tprs_preadjust", "rule:bic-ne").is_some());
        assert!(a.summary.get("wavelet", "3").is_some());
        assert!(a.summary.get("wavelet", "4").is_none());
        assert!(a.summary.estimators.iter().all(|e| e.type1_error.is_none()));
    }

    #[test]
    fn zero_effect_reports_type1_error() {
        let s = SimulationScenario { beta: 0.0, battery: Battery::unadjusted_only(), ..small_scenario() };
        let out = run_scenario(&s).unwrap();
        assert!(out.summary.estimators[0].type1_error.is_some());
        assert_eq!(out.records.len(), 6);
    }
}
