//! Effective bandwidth: the physical distance at which an adjustment stops
//! removing variation.
//!
//! For projection smoothers each column of `S` is a weight profile around
//! one location. The profiles are loess-smoothed against distance, their
//! pointwise median is taken on a common distance grid, and `k_hat` is the
//! first zero crossing of that median. Fourier filters use the zero crossing
//! of the filter kernel, wavelets the closed form `2^-L`.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::spectral::filter_kernel;
use crate::tprs::{SmoothingMatrix, TprsSpace};

/// Columns of `S` used for the median profile when there are many locations.
pub const MAX_PROFILE_COLUMNS: usize = 500;
const PROFILE_SEED: u64 = 0x6b68_6174;
/// Largest side of the lattice used for TPRS bandwidth curves.
pub const TPRS_BANDWIDTH_SIDE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoessConfig {
    pub span: f64,
    pub degree: usize,
    pub eval_points: usize,
}

impl Default for LoessConfig {
    fn default() -> Self {
        Self { span: 0.1, degree: 1, eval_points: 512 }
    }
}

impl LoessConfig {
    fn window(&self, n: usize) -> Result<usize> {
        if !(self.span > 0.0 && self.span <= 1.0) {
            return Err(Error::InvalidConfig(format!("loess span must lie in (0, 1], got {}", self.span)));
        }
        if !(1..=2).contains(&self.degree) {
            return Err(Error::InvalidConfig(format!("loess degree must be 1 or 2, got {}", self.degree)));
        }
        if self.eval_points < 2 {
            return Err(Error::InvalidConfig("need at least two evaluation points".into()));
        }
        let k = ((self.span * n as f64) + 1e-10).floor() as usize;
        let required = self.degree + 2;
        if k < required {
            return Err(Error::InsufficientPoints { found: k, required });
        }
        Ok(k)
    }
}

/// Outcome of a bandwidth computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthResult {
    /// `None` when the profile never reaches zero.
    pub k_hat: Option<f64>,
    /// Distances of the diagnostic profile.
    pub distance: Vec<f64>,
    /// Median smoothed profile (or kernel profile) at `distance`.
    pub profile: Vec<f64>,
}

impl BandwidthResult {
    pub fn closed_form(k_hat: f64) -> Self {
        Self { k_hat: Some(k_hat), distance: vec![], profile: vec![] }
    }
}

fn tricube(t: f64) -> f64 {
    if t >= 1.0 {
        0.0
    } else {
        let a = 1.0 - t * t * t;
        a * a * a
    }
}

/// Local polynomial regression with tricube weights over the `span * n`
/// nearest neighbours of each evaluation point.
pub fn loess_fit(xs: &[f64], ys: &[f64], config: &LoessConfig, eval_at: &[f64]) -> Result<Vec<f64>> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch { expected: xs.len(), found: ys.len() });
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loess input"));
    }
    let k = config.window(xs.len())?;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let sx: Vec<f64> = order.iter().map(|&i| xs[i]).collect();
    let sy: Vec<f64> = order.iter().map(|&i| ys[i]).collect();
    let mut evals: Vec<(usize, f64)> = eval_at.iter().copied().enumerate().collect();
    evals.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut out = vec![0.0; eval_at.len()];
    let mut lo = 0usize;
    for (slot, x0) in evals {
        lo = slide_window(&sx, k, x0, lo);
        out[slot] = local_fit(&sx[lo..lo + k], &sy[lo..lo + k], x0, config.degree)?;
    }
    Ok(out)
}

/// Start of the length-`k` window of sorted `xs` nearest to `x0`; `lo` is a
/// lower bound (windows move right as `x0` increases).
fn slide_window(xs: &[f64], k: usize, x0: f64, mut lo: usize) -> usize {
    while lo + k < xs.len() && x0 - xs[lo] > xs[lo + k] - x0 {
        lo += 1;
    }
    lo
}

/// Weighted local fit of the given degree at `x0`. When the positive-weight
/// points do not determine a polynomial of that degree (all share one
/// abscissa) the degree is lowered.
fn local_fit(xs: &[f64], ys: &[f64], x0: f64, degree: usize) -> Result<f64> {
    let h = xs.iter().map(|x| (x - x0).abs()).fold(0.0, f64::max);
    if h == 0.0 {
        return Ok(ys.iter().sum::<f64>() / ys.len() as f64);
    }
    // Points tied at the window edge keep a negligible positive weight, so a
    // window whose members are all equidistant from x0 still has support.
    let h = h * (1.0 + 1e-6);
    // Normal equations in the centred variable t = (x - x0) / h.
    let mut xtx: Matrix3<f64> = Matrix3::zeros();
    let mut xty: Vector3<f64> = Vector3::zeros();
    let mut support = 0usize;
    for (&x, &y) in xs.iter().zip(ys) {
        let t = (x - x0) / h;
        let w = tricube(t.abs());
        if w == 0.0 {
            continue;
        }
        support += 1;
        let phi = Vector3::new(1.0, t, t * t);
        for a in 0..3 {
            xty[a] += w * phi[a] * y;
            for b in 0..3 {
                xtx[(a, b)] += w * phi[a] * phi[b];
            }
        }
    }
    if support == 0 {
        return Err(Error::InsufficientPoints { found: 0, required: degree + 1 });
    }
    for p in (1..=degree + 1).rev() {
        let a = xtx.view((0, 0), (p, p)).into_owned();
        // Reject near-singular systems: relative pivot check on the Cholesky factor.
        if let Some(chol) = a.clone().cholesky() {
            let l = chol.l();
            let ok = (0..p).all(|i| l[(i, i)] * l[(i, i)] > 1e-12 * a[(i, i)].max(f64::MIN_POSITIVE));
            if ok {
                return Ok(chol.solve(&xty.rows(0, p).into_owned())[0]);
            }
        }
    }
    unreachable!("degree-0 system has a positive weight sum")
}

/// First point where `profile` drops to or below zero after starting above
/// it, linearly interpolated between the bracketing grid points.
fn first_nonpositive(distance: &[f64], profile: &[f64]) -> Option<f64> {
    let mut prev: Option<(f64, f64)> = None;
    for (&d, &v) in distance.iter().zip(profile) {
        if !v.is_finite() {
            continue;
        }
        if v <= 0.0 {
            return Some(match prev {
                Some((d0, v0)) => d0 + (d - d0) * v0 / (v0 - v),
                None => d,
            });
        }
        prev = Some((d, v));
    }
    None
}

fn median_in_place(vals: &mut [f64]) -> f64 {
    vals.sort_by(f64::total_cmp);
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}

/// Median loess profile of the columns of `S` against distance, and its
/// first zero crossing.
pub fn effective_bandwidth_smoother(
    s: &SmoothingMatrix,
    locations: &[[f64; 2]],
    config: &LoessConfig,
) -> Result<BandwidthResult> {
    let n = s.n();
    if locations.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: locations.len() });
    }
    config.window(n)?;
    let columns: Vec<usize> = if n > 1000 {
        let mut rng = ChaCha8Rng::seed_from_u64(PROFILE_SEED);
        let mut idx = rand::seq::index::sample(&mut rng, n, MAX_PROFILE_COLUMNS).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };
    let max_dist = bounding_diameter(locations);
    let grid: Vec<f64> =
        (0..config.eval_points).map(|i| max_dist * i as f64 / (config.eval_points - 1) as f64).collect();

    let profiles: Vec<Vec<f64>> = columns
        .par_iter()
        .map(|&i| -> Result<Vec<f64>> {
            let col = s.column(i);
            let xi = locations[i];
            let d: Vec<f64> = locations.iter().map(|p| (p[0] - xi[0]).hypot(p[1] - xi[1])).collect();
            let reach = d.iter().copied().fold(0.0, f64::max);
            let inside: Vec<f64> = grid.iter().copied().filter(|&g| g <= reach).collect();
            let mut fit = loess_fit(&d, col.as_slice(), config, &inside)?;
            fit.resize(grid.len(), f64::NAN);
            Ok(fit)
        })
        .collect::<Result<_>>()?;

    let mut scratch = Vec::with_capacity(profiles.len());
    let profile: Vec<f64> = (0..grid.len())
        .map(|g| {
            scratch.clear();
            scratch.extend(profiles.iter().map(|p| p[g]).filter(|v| v.is_finite()));
            if scratch.is_empty() {
                f64::NAN
            } else {
                median_in_place(&mut scratch)
            }
        })
        .collect();
    let k_hat = first_nonpositive(&grid, &profile);
    Ok(BandwidthResult { k_hat, distance: grid, profile })
}

fn bounding_diameter(points: &[[f64; 2]]) -> f64 {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (hi[0] - lo[0]).hypot(hi[1] - lo[1])
}

/// TPRS bandwidth for each `df`, computed on a lattice spanning the grid's
/// extent with at most [`TPRS_BANDWIDTH_SIDE`] cells per side. One
/// eigendecomposition serves every `df`.
pub fn tprs_bandwidth_curve(grid: &Grid, dfs: &[usize], config: &LoessConfig) -> Result<Vec<BandwidthResult>> {
    let Some(&max_df) = dfs.iter().max() else {
        return Ok(vec![]);
    };
    let lattice = coarse_lattice(grid);
    let points = lattice.all_coords();
    let space = TprsSpace::at_locations(&points, max_df)?;
    let nested = space.nested_basis(&points)?;
    dfs.iter()
        .map(|&df| {
            if df < 3 {
                return Err(Error::InvalidDf { df, reason: "need at least 3".into() });
            }
            let s = SmoothingMatrix::from_orthonormal(nested.columns(0, df).into_owned());
            effective_bandwidth_smoother(&s, &points, config)
        })
        .collect()
}

fn coarse_lattice(grid: &Grid) -> Grid {
    let (wu, wv) = grid.extent();
    let m = grid.m().min(TPRS_BANDWIDTH_SIDE);
    let n = grid.n().min(TPRS_BANDWIDTH_SIDE);
    Grid::new(m, n, wu / m as f64, wv / n as f64, grid.origin()).expect("coarsened grid keeps a valid shape")
}

/// Bandwidth of the Fourier high-pass filter with cutoff `cutoff`.
///
/// The kernel is read along both grid axes from the zero-displacement cell
/// out to half the domain; `k_hat` is the nearest point at which either
/// profile climbs back from negative to non-negative values.
pub fn effective_bandwidth_filter(cutoff: f64, grid: &Grid) -> Result<BandwidthResult> {
    let kernel = filter_kernel(cutoff, grid)?;
    let (m, n) = (grid.m(), grid.n());
    let along_u: Vec<f64> = (0..m / 2).map(|c| kernel.get(c, 0)).collect();
    let along_v: Vec<f64> = (0..n / 2).map(|r| kernel.get(0, r)).collect();
    let cross_u = upward_crossing(&along_u).map(|t| t * grid.spacing_u());
    let cross_v = upward_crossing(&along_v).map(|t| t * grid.spacing_v());
    let k_hat = match (cross_u, cross_v) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    let (distance, profile) = if grid.spacing_u() <= grid.spacing_v() {
        ((0..along_u.len()).map(|c| c as f64 * grid.spacing_u()).collect(), along_u)
    } else {
        ((0..along_v.len()).map(|r| r as f64 * grid.spacing_v()).collect(), along_v)
    };
    Ok(BandwidthResult { k_hat, distance, profile })
}

/// Fractional index of the first negative-to-non-negative transition.
fn upward_crossing(profile: &[f64]) -> Option<f64> {
    (1..profile.len().saturating_sub(1)).find_map(|i| {
        let (a, b) = (profile[i], profile[i + 1]);
        (a < 0.0 && b >= 0.0).then(|| i as f64 - a / (b - a))
    })
}

/// Closed-form bandwidth of thresholding wavelet levels `0..=level`, in
/// units of the dyadic domain.
pub fn effective_bandwidth_wavelet(level: usize) -> BandwidthResult {
    BandwidthResult::closed_form((-(level as f64)).exp2())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::Rng;

    /// Reference loess: full sort per evaluation point, normal equations
    /// solved by a general LU.
    fn brute_loess(xs: &[f64], ys: &[f64], span: f64, degree: usize, x0: f64) -> f64 {
        let n = xs.len();
        let k = (span * n as f64 + 1e-10).floor() as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| (xs[a] - x0).abs().total_cmp(&(xs[b] - x0).abs()));
        let near = &idx[..k];
        let h = near.iter().map(|&i| (xs[i] - x0).abs()).fold(0.0, f64::max) * (1.0 + 1e-6);
        let p = degree + 1;
        let mut a = DMatrix::zeros(p, p);
        let mut b = DMatrix::zeros(p, 1);
        for &i in near {
            let w = tricube((xs[i] - x0).abs() / h);
            for r in 0..p {
                b[(r, 0)] += w * (xs[i] - x0).powi(r as i32) * ys[i];
                for c in 0..p {
                    a[(r, c)] += w * (xs[i] - x0).powi((r + c) as i32);
                }
            }
        }
        a.lu().solve(&b).unwrap()[(0, 0)]
    }

    fn noisy_sine() -> (Vec<f64>, Vec<f64>) {
        let xs: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        let ys = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let h = ((i as f64) * 12.9898).sin() * 43758.5453;
                (std::f64::consts::TAU * x).sin() + 0.3 * (h - h.floor() - 0.5)
            })
            .collect();
        (xs, ys)
    }

    #[test]
    fn loess_reproduces_lines_and_constants() {
        let xs: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let line: Vec<f64> = xs.iter().map(|x| 1.5 - 2.0 * x).collect();
        let cfg = LoessConfig { span: 0.3, degree: 1, eval_points: 10 };
        let at = [-2.0, 0.0, 0.5, 2.9];
        for (f, x) in loess_fit(&xs, &line, &cfg, &at).unwrap().iter().zip(at) {
            assert!((f - (1.5 - 2.0 * x)).abs() < 1e-8);
        }
        let flat = vec![4.0; 50];
        let cfg2 = LoessConfig { degree: 2, ..cfg };
        assert!(loess_fit(&xs, &flat, &cfg2, &at).unwrap().iter().all(|f| (f - 4.0).abs() < 1e-10));
    }

    #[test]
    fn loess_matches_brute_force_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<f64> = (0..300).map(|_| rng.random::<f64>() * 2.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (3.0 * x).cos() + 0.2 * rng.random::<f64>()).collect();
        for degree in [1, 2] {
            let cfg = LoessConfig { span: 0.2, degree, eval_points: 2 };
            let at: Vec<f64> = (0..41).map(|i| i as f64 * 0.05).collect();
            let fast = loess_fit(&xs, &ys, &cfg, &at).unwrap();
            for (f, &x0) in fast.iter().zip(&at) {
                let b = brute_loess(&xs, &ys, 0.2, degree, x0);
                assert!((f - b).abs() < 1e-9, "degree {degree} at {x0}: {f} vs {b}");
            }
        }
    }

    #[test]
    fn loess_agrees_with_reference_implementation() {
        // Values from an independent lowess implementation (frac 0.3, no
        // robustness iterations) on the same deterministic data.
        let (xs, ys) = noisy_sine();
        let reference = [
            (0usize, 0.032_510_957_901_207_345),
            (10, 0.553_873_648_450_163_2),
            (25, 0.929_107_808_088_956_3),
            (50, -0.048_487_387_375_574_67),
            (75, -0.989_846_364_502_599_9),
            (99, -0.046_883_191_212_978_97),
        ];
        let cfg = LoessConfig { span: 0.3, degree: 1, eval_points: 2 };
        let fit = loess_fit(&xs, &ys, &cfg, &xs).unwrap();
        let rms = (reference.iter().map(|&(i, r)| (fit[i] - r).powi(2)).sum::<f64>() / reference.len() as f64).sqrt();
        assert!(rms < 1e-3, "rms {rms}");
    }

    #[test]
    fn loess_rejects_tiny_windows() {
        let cfg = LoessConfig { span: 0.1, degree: 1, eval_points: 10 };
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert!(matches!(loess_fit(&xs, &xs, &cfg, &[1.0]), Err(Error::InsufficientPoints { .. })));
    }

    #[test]
    fn positive_smoother_is_undefined() {
        // Constant-only smoother: every column is 1/n everywhere.
        let g = Grid::unit_square(10, 10).unwrap();
        let q = DMatrix::from_element(100, 1, 0.1);
        let s = SmoothingMatrix::from_orthonormal(q);
        let r = effective_bandwidth_smoother(&s, &g.all_coords(), &LoessConfig::default());
        let r = r.map_err(|e| e.to_string()).unwrap();
        assert_eq!(r.k_hat, None);
    }

    #[test]
    fn wavelet_closed_form() {
        assert_eq!(effective_bandwidth_wavelet(0).k_hat, Some(1.0));
        assert_eq!(effective_bandwidth_wavelet(3).k_hat, Some(0.125));
        assert_eq!(effective_bandwidth_wavelet(9).k_hat, Some(1.0 / 512.0));
    }

    #[test]
    fn fourier_low_cutoffs_are_undefined() {
        let g = Grid::unit_square(128, 128).unwrap();
        for w in [1.0, 2.0] {
            assert_eq!(effective_bandwidth_filter(w, &g).unwrap().k_hat, None);
        }
        let k = effective_bandwidth_filter(10.0, &g).unwrap().k_hat.unwrap();
        assert!(k > 0.0 && k < 0.2);
    }

    #[test]
    fn crossing_interpolates() {
        assert_eq!(upward_crossing(&[1.0, -1.0, 1.0, 2.0]), Some(1.5));
        assert_eq!(first_nonpositive(&[0.0, 1.0, 2.0], &[2.0, 1.0, -1.0]), Some(1.5));
        assert_eq!(first_nonpositive(&[0.0, 1.0], &[2.0, 1.0]), None);
    }
}
