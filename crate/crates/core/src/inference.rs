//! Least-squares fits with classical and sandwich covariances, the two
//! adjustment estimators, and the closed-form bias expression for the
//! pre-adjusted exposure coefficient.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Cohort;
use crate::linalg;
use crate::tprs::{BasisMatrix, BasisMeta};

/// Normal quantile used for 95% intervals.
pub const CI_MULTIPLIER: f64 = 1.96;

/// Variance inflation of the exposure column above which a fit is flagged
/// as nearly collinear with the adjustment basis.
const VIF_WARNING: f64 = 1e6;

/// Gaussian maximum log-likelihood given the weighted residual sum of squares.
pub fn gaussian_loglik(weighted_rss: f64, n: usize, sum_log_w: f64) -> f64 {
    let nf = n as f64;
    let sigma2 = weighted_rss / nf;
    -0.5 * (nf * (std::f64::consts::TAU * sigma2).ln() + nf - sum_log_w)
}

pub fn aic(loglik: f64, p: usize) -> f64 {
    2.0 * (p + 1) as f64 - 2.0 * loglik
}

pub fn bic(loglik: f64, p: usize, n: usize) -> f64 {
    (p + 1) as f64 * (n as f64).ln() - 2.0 * loglik
}

/// A fitted linear model.
#[derive(Clone, Debug)]
pub struct FitResult {
    /// One entry per design column; dropped columns hold `NaN`.
    coefficients: Vec<f64>,
    /// Design columns that entered the fit, ascending.
    kept: Vec<usize>,
    /// Covariances over `kept`, in the same order.
    cov_classical: DMatrix<f64>,
    cov_sandwich: DMatrix<f64>,
    residuals: Vec<f64>,
    log_likelihood: f64,
    n: usize,
    /// Mean parameters: kept columns plus any extra components.
    p: usize,
    /// Variance inflation of the last column in fitting order.
    last_vif: f64,
}

impl FitResult {
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn coefficient(&self, j: usize) -> Option<f64> {
        self.coefficients.get(j).copied().filter(|c| !c.is_nan())
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn dropped(&self) -> Vec<usize> {
        (0..self.coefficients.len()).filter(|j| self.kept.binary_search(j).is_err()).collect()
    }

    fn position(&self, j: usize) -> Option<usize> {
        self.kept.binary_search(&j).ok()
    }

    pub fn cov_classical(&self) -> &DMatrix<f64> {
        &self.cov_classical
    }

    pub fn cov_sandwich(&self) -> &DMatrix<f64> {
        &self.cov_sandwich
    }

    pub fn se_sandwich(&self, j: usize) -> Option<f64> {
        self.position(j).map(|k| self.cov_sandwich[(k, k)].max(0.0).sqrt())
    }

    pub fn se_classical(&self, j: usize) -> Option<f64> {
        self.position(j).map(|k| self.cov_classical[(k, k)].max(0.0).sqrt())
    }

    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn aic(&self) -> f64 {
        aic(self.log_likelihood, self.p)
    }

    pub fn bic(&self) -> f64 {
        bic(self.log_likelihood, self.p, self.n)
    }

    /// Counts `extra` additional mean parameters (components removed by a
    /// filter before fitting).
    pub fn with_extra_params(mut self, extra: usize) -> Self {
        self.p += extra;
        self
    }
}

fn validate(y: &[f64], x: &DMatrix<f64>, weights: Option<&[f64]>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch { expected: y.len(), found: x.nrows() });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("response"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("design matrix"));
    }
    if let Some(w) = weights {
        if w.len() != y.len() {
            return Err(Error::DimensionMismatch { expected: y.len(), found: w.len() });
        }
        if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig("weights must be positive and finite".into()));
        }
    }
    Ok(())
}

/// Core solver: columns are orthogonalised in `order`, dropping dependent
/// ones.
fn solve(y: &[f64], x: &DMatrix<f64>, weights: Option<&[f64]>, order: &[usize]) -> FitResult {
    let n = y.len();
    let sw: Vec<f64> = match weights {
        Some(w) => w.iter().map(|v| v.sqrt()).collect(),
        None => vec![1.0; n],
    };
    let a = DMatrix::from_fn(n, order.len(), |i, c| sw[i] * x[(i, order[c])]);
    let (q, kept_local) = linalg::guarded_orthonormalize(&a);
    let k = kept_local.len();
    let ak = a.select_columns(&kept_local);
    let r = q.transpose() * &ak;
    let ys = DVector::from_iterator(n, y.iter().zip(&sw).map(|(v, s)| v * s));
    let beta = r.solve_upper_triangular(&(q.transpose() * &ys)).expect("R has a non-zero diagonal");

    let xk = x.select_columns(&kept_local.iter().map(|&c| order[c]).collect::<Vec<_>>());
    let resid = DVector::from_column_slice(y) - &xk * &beta;
    let w_r2: Vec<f64> = resid.iter().zip(&sw).map(|(r, s)| (r * s).powi(2)).collect();
    let rss: f64 = w_r2.iter().sum();

    let r_inv = r.clone().try_inverse().expect("R has a non-zero diagonal");
    let unscaled = &r_inv * r_inv.transpose();
    let dof = n.saturating_sub(k);
    let sigma2 = if rss == 0.0 { 0.0 } else if dof == 0 { f64::INFINITY } else { rss / dof as f64 };
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..n {
        let row = q.row(i);
        meat.ger(w_r2[i], &row.transpose(), &row.transpose(), 1.0);
    }
    let sandwich = &r_inv * meat * r_inv.transpose();

    // Reorder everything to ascending original column index.
    let orig: Vec<usize> = kept_local.iter().map(|&c| order[c]).collect();
    let mut perm: Vec<usize> = (0..k).collect();
    perm.sort_by_key(|&i| orig[i]);
    let kept: Vec<usize> = perm.iter().map(|&i| orig[i]).collect();
    let mut coefficients = vec![f64::NAN; x.ncols()];
    for (i, &c) in orig.iter().enumerate() {
        coefficients[c] = beta[i];
    }
    let reorder = |m: &DMatrix<f64>| DMatrix::from_fn(k, k, |i, j| m[(perm[i], perm[j])]);

    let last_vif = match kept_local.last() {
        Some(&c) if c == order.len() - 1 => {
            let own = a.column(c).norm_squared();
            own / r[(k - 1, k - 1)].powi(2)
        }
        _ => f64::INFINITY,
    };
    let sum_log_w = weights.map_or(0.0, |w| w.iter().map(|v| v.ln()).sum());
    FitResult {
        coefficients,
        kept,
        cov_classical: reorder(&(unscaled * sigma2)),
        cov_sandwich: reorder(&sandwich),
        residuals: resid.as_slice().to_vec(),
        log_likelihood: gaussian_loglik(rss, n, sum_log_w),
        n,
        p: k,
        last_vif,
    }
}

/// (Weighted) least squares on a full-rank design.
pub fn fit_ols(y: &[f64], x: &DMatrix<f64>, weights: Option<&[f64]>) -> Result<FitResult> {
    validate(y, x, weights)?;
    let order: Vec<usize> = (0..x.ncols()).collect();
    let fit = solve(y, x, weights, &order);
    if fit.kept.len() < x.ncols() {
        return Err(Error::RankDeficient { rank: fit.kept.len(), cols: x.ncols() });
    }
    Ok(fit)
}

/// Least squares that drops numerically dependent columns instead of
/// failing. Columns are processed in `order`, so a column late in the order
/// is the one dropped when it depends on earlier ones.
pub fn fit_ols_guarded(y: &[f64], x: &DMatrix<f64>, weights: Option<&[f64]>, order: &[usize]) -> Result<FitResult> {
    validate(y, x, weights)?;
    if order.len() != x.ncols() {
        return Err(Error::DimensionMismatch { expected: x.ncols(), found: order.len() });
    }
    Ok(solve(y, x, weights, order))
}

/// Reported exposure effect from one adjusted fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub beta_hat: f64,
    pub se_sandwich: f64,
    pub ci95: (f64, f64),
    /// Amount of adjustment: df, cutoff or level.
    pub tuning: f64,
    pub k_hat: Option<f64>,
}

impl Estimate {
    pub fn new(beta_hat: f64, se_sandwich: f64, tuning: f64, k_hat: Option<f64>) -> Self {
        let half = CI_MULTIPLIER * se_sandwich;
        Self { beta_hat, se_sandwich, ci95: (beta_hat - half, beta_hat + half), tuning, k_hat }
    }

    pub fn covers(&self, beta: f64) -> bool {
        self.ci95.0 <= beta && beta <= self.ci95.1
    }

    /// Two-sided rejection of `beta = 0` at the 5% level.
    pub fn rejects_zero(&self) -> bool {
        !self.covers(0.0)
    }
}

fn tuning_of(meta: &BasisMeta, ncols: usize) -> f64 {
    match meta {
        BasisMeta::Tprs { df } => *df as f64,
        BasisMeta::Fourier { cutoff } => *cutoff,
        BasisMeta::Wavelet { level } => *level as f64,
        BasisMeta::Custom => ncols as f64,
    }
}

/// Design `[1, x, z, H]` for the outcome model.
fn outcome_design(cohort: &Cohort, basis: Option<&BasisMatrix>) -> DMatrix<f64> {
    let n = cohort.len();
    let p = cohort.p();
    let m = basis.map_or(0, |b| b.ncols());
    let mut d = DMatrix::zeros(n, 2 + p + m);
    d.column_mut(0).fill(1.0);
    d.column_mut(1).copy_from_slice(cohort.x());
    if let Some(z) = cohort.z() {
        d.columns_mut(2, p).copy_from(z);
    }
    if let Some(b) = basis {
        d.columns_mut(2 + p, m).copy_from(b.values());
    }
    d
}

/// Outcome-model adjustment: regress `y` on `[1, x, z, H]` and report the
/// exposure coefficient. Basis columns collinear with the intercept or `z`
/// are dropped; the exposure is fitted last so collinearity with the basis
/// shows up as a large variance inflation (logged) or, at the extreme, a
/// rank error.
pub fn fit_outcome_adjusted(cohort: &Cohort, basis: Option<&BasisMatrix>) -> Result<(Estimate, FitResult)> {
    if let Some(b) = basis {
        if b.nrows() != cohort.len() {
            return Err(Error::DimensionMismatch { expected: cohort.len(), found: b.nrows() });
        }
    }
    let d = outcome_design(cohort, basis);
    let mut order: Vec<usize> = (0..d.ncols()).filter(|&c| c != 1).collect();
    order.push(1);
    let fit = fit_ols_guarded(cohort.y(), &d, cohort.weights(), &order)?;
    let Some(beta) = fit.coefficient(1) else {
        log::warn!("exposure is in the span of the adjustment basis; no estimate");
        return Err(Error::RankDeficient { rank: fit.kept.len(), cols: d.ncols() });
    };
    if fit.last_vif > VIF_WARNING {
        log::warn!("exposure nearly collinear with the adjustment basis (variance inflation {:.3e})", fit.last_vif);
    }
    let se = fit.se_sandwich(1).expect("kept column has a variance");
    let tuning = basis.map_or(0.0, |b| tuning_of(b.meta(), b.ncols()));
    Ok((Estimate::new(beta, se, tuning, None), fit))
}

/// Outcome model without the exposure, `[1, z, H]`, for the no-exposure
/// information criteria.
pub fn fit_no_exposure(cohort: &Cohort, basis: Option<&BasisMatrix>) -> Result<FitResult> {
    let d = outcome_design(cohort, basis);
    let cols: Vec<usize> = (0..d.ncols()).filter(|&c| c != 1).collect();
    let d = d.select_columns(&cols);
    let order: Vec<usize> = (0..d.ncols()).collect();
    fit_ols_guarded(cohort.y(), &d, cohort.weights(), &order)
}

/// Pre-adjustment: regress `y` on `[1, x1, x2, z]` and report the `x2`
/// coefficient. A vanishing `x1` (no adjustment) is dropped by the rank
/// guard, which reduces the fit to the unadjusted regression.
pub fn fit_preadjusted(
    cohort: &Cohort,
    x1: &[f64],
    x2: &[f64],
    weights: Option<&[f64]>,
) -> Result<(Estimate, FitResult)> {
    let n = cohort.len();
    for v in [x1, x2] {
        if v.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: v.len() });
        }
    }
    let p = cohort.p();
    let mut d = DMatrix::zeros(n, 3 + p);
    d.column_mut(0).fill(1.0);
    d.column_mut(1).copy_from_slice(x1);
    d.column_mut(2).copy_from_slice(x2);
    if let Some(z) = cohort.z() {
        d.columns_mut(3, p).copy_from(z);
    }
    let mut order: Vec<usize> = (0..d.ncols()).filter(|&c| c != 2).collect();
    order.push(2);
    let weights = weights.or(cohort.weights());
    let fit = fit_ols_guarded(cohort.y(), &d, weights, &order)?;
    if fit.coefficient(1).is_none() {
        log::debug!("x1 dropped from the pre-adjusted fit");
    }
    let Some(beta) = fit.coefficient(2) else {
        log::warn!("pre-adjusted exposure x2 vanished; no estimate");
        return Err(Error::RankDeficient { rank: fit.kept.len(), cols: d.ncols() });
    };
    let se = fit.se_sandwich(2).expect("kept column has a variance");
    Ok((Estimate::new(beta, se, 0.0, None), fit))
}

/// Closed-form bias structure of the pre-adjusted coefficient for the
/// regression of `f` on `[x1, x2, z]` with `x1` orthogonal to `x2`.
///
/// Returns `det(G) * bias`, where `G` is the Gram matrix of `[x1, x2, z]`;
/// since `det(G) >= 0` the value has the sign of the bias and vanishes when
/// `x2` is orthogonal to both `f` and `z`.
pub fn bias_beta2_oracle(x1: &[f64], x2: &[f64], z: &[f64], f: &[f64]) -> Result<f64> {
    let n = x1.len();
    for v in [x2, z, f] {
        if v.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: v.len() });
        }
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let (x2f, x2z) = (dot(x2, f), dot(x2, z));
    let (x1z, x1x1, zz, x1f, zf) = (dot(x1, z), dot(x1, x1), dot(z, z), dot(x1, f), dot(z, f));
    Ok(x2f * (x1x1 * zz - x1z * x1z) + x2z * (x1z * x1f - x1x1 * zf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn exact_line_has_zero_covariance() {
        let x: Vec<f64> = (0..6).map(|i| i as f64 * 0.7).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 + 3.0 * v).collect();
        let d = DMatrix::from_fn(6, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
        let fit = fit_ols(&y, &d, None).unwrap();
        assert!((fit.coefficients()[0] - 2.0).abs() < 1e-12);
        assert!((fit.coefficients()[1] - 3.0).abs() < 1e-12);
        assert!(fit.cov_classical().amax() < 1e-12);
        assert!(fit.cov_sandwich().amax() < 1e-12);
    }

    #[test]
    fn four_point_fit_matches_normal_equations() {
        let x = [0.0, 1.0, 2.0, 4.0];
        let y = [1.0, 2.5, 2.0, 6.0];
        let d = DMatrix::from_fn(4, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
        let fit = fit_ols(&y, &d, None).unwrap();
        // Brute force: (X'X)^-1 X'y and the White meat, straight from the formulas.
        let xtx = d.transpose() * &d;
        let inv = xtx.try_inverse().unwrap();
        let beta = &inv * d.transpose() * DVector::from_column_slice(&y);
        let r = DVector::from_column_slice(&y) - &d * &beta;
        let meat = d.transpose() * DMatrix::from_diagonal(&r.map(|v| v * v)) * &d;
        let sandwich = &inv * meat * &inv;
        for j in 0..2 {
            assert!((fit.coefficients()[j] - beta[j]).abs() < 1e-12);
        }
        assert!((fit.cov_sandwich() - &sandwich).amax() < 1e-12);
        let s2 = r.norm_squared() / 2.0;
        assert!((fit.cov_classical() - inv * s2).amax() < 1e-12);
        // Residuals orthogonal to the design.
        let rt = d.transpose() * DVector::from_column_slice(fit.residuals());
        assert!(rt.amax() < 1e-10);
    }

    #[test]
    fn constant_weights_leave_coefficients_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = normals(30, &mut rng);
        let y: Vec<f64> = x.iter().zip(normals(30, &mut rng)).map(|(a, e)| 1.0 - a + e).collect();
        let d = DMatrix::from_fn(30, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
        let a = fit_ols(&y, &d, None).unwrap();
        let b = fit_ols(&y, &d, Some(&[3.5; 30])).unwrap();
        for j in 0..2 {
            assert!((a.coefficients()[j] - b.coefficients()[j]).abs() < 1e-12);
        }
        assert!((a.cov_sandwich() - b.cov_sandwich()).amax() < 1e-12);
    }

    #[test]
    fn weighted_residuals_are_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = normals(25, &mut rng);
        let y = normals(25, &mut rng);
        let w: Vec<f64> = (0..25).map(|i| 1.0 / (1 + i % 3) as f64).collect();
        let d = DMatrix::from_fn(25, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
        let fit = fit_ols(&y, &d, Some(&w)).unwrap();
        for j in 0..2 {
            let s: f64 = (0..25).map(|i| w[i] * d[(i, j)] * fit.residuals()[i]).sum();
            assert!(s.abs() < 1e-10);
        }
    }

    #[test]
    fn information_criteria_follow_definitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = normals(40, &mut rng);
        let y = normals(40, &mut rng);
        let d = DMatrix::from_fn(40, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
        let fit = fit_ols(&y, &d, None).unwrap();
        let rss: f64 = fit.residuals().iter().map(|r| r * r).sum();
        let s2 = rss / 40.0;
        let ll = -20.0 * (std::f64::consts::TAU * s2).ln() - 20.0;
        assert!((fit.log_likelihood() - ll).abs() < 1e-10);
        assert!((fit.aic() - (6.0 - 2.0 * ll)).abs() < 1e-10);
        assert!((fit.bic() - (3.0 * 40f64.ln() - 2.0 * ll)).abs() < 1e-10);
        let more = fit.clone().with_extra_params(4);
        assert!((more.aic() - fit.aic() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn strict_fit_rejects_rank_deficiency() {
        let d = DMatrix::from_fn(5, 3, |i, j| if j == 2 { 2.0 * i as f64 } else if j == 1 { i as f64 } else { 1.0 });
        let y = [1.0, 2.0, 0.0, 1.0, 3.0];
        assert!(matches!(fit_ols(&y, &d, None), Err(Error::RankDeficient { rank: 2, cols: 3 })));
        let g = fit_ols_guarded(&y, &d, None, &[0, 1, 2]).unwrap();
        assert_eq!(g.dropped(), vec![2]);
        assert!(g.coefficient(2).is_none());
    }

    fn cohort(grid: &Grid, n: usize, seed: u64, y_of: impl Fn(f64, usize) -> f64) -> Cohort {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells: Vec<usize> = (0..n).map(|i| (i * 7) % grid.cells()).collect();
        let x = normals(n, &mut rng);
        let y = x.iter().enumerate().map(|(i, &v)| y_of(v, cells[i])).collect();
        Cohort::new(grid, cells, y, x, None, None).unwrap()
    }

    #[test]
    fn confounder_in_span_is_removed_exactly() {
        let g = Grid::unit_square(10, 10).unwrap();
        let h = |s: usize| {
            let c = g.coords(s);
            (3.0 * c[0]).sin() + c[1] * c[1]
        };
        let c = cohort(&g, 60, 4, |x, s| 1.5 * x + h(s));
        let basis = DMatrix::from_fn(60, 2, |i, j| if j == 0 { 1.0 } else { h(c.location_index()[i]) });
        let b = BasisMatrix::new(basis, crate::tprs::BasisOrdering::TprsDf, BasisMeta::Custom).unwrap();
        let (est, fit) = fit_outcome_adjusted(&c, Some(&b)).unwrap();
        assert!((est.beta_hat - 1.5).abs() < 1e-10);
        // The basis constant duplicates the intercept and is dropped silently.
        assert_eq!(fit.dropped(), vec![2]);
    }

    #[test]
    fn frisch_waugh_lovell_equivalence() {
        let g = Grid::unit_square(12, 12).unwrap();
        let pts = g.all_coords();
        let c = cohort(&g, 90, 5, |x, s| 2.0 * x + (5.0 * pts[s][0]).cos() + 0.1 * s as f64 / 144.0);
        let coords: Vec<[f64; 2]> = c.location_index().iter().map(|&s| pts[s]).collect();
        let b = crate::tprs::tprs_basis(&coords, 12).unwrap();
        let (outcome, _) = fit_outcome_adjusted(&c, Some(&b)).unwrap();
        let (x1, x2) = crate::tprs::project_decompose(c.x(), &b).unwrap();
        let (pre, _) = fit_preadjusted(&c, &x1, &x2, None).unwrap();
        assert!((outcome.beta_hat - pre.beta_hat).abs() < 1e-8);
    }

    #[test]
    fn zero_x1_reduces_to_unadjusted_slope() {
        let g = Grid::unit_square(6, 6).unwrap();
        let c = cohort(&g, 30, 6, |x, s| 0.5 * x + s as f64 * 0.01);
        let (pre, fit) = fit_preadjusted(&c, &[0.0; 30], c.x(), None).unwrap();
        let (raw, _) = fit_outcome_adjusted(&c, None).unwrap();
        assert!((pre.beta_hat - raw.beta_hat).abs() < 1e-12);
        assert_eq!(fit.dropped(), vec![1]);
    }

    #[test]
    fn sandwich_is_positive_semidefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = DMatrix::from_fn(50, 5, |_, _| StandardNormal.sample(&mut rng));
        let y = normals(50, &mut rng);
        let fit = fit_ols(&y, &d, None).unwrap();
        let eig = fit.cov_sandwich().clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l > -1e-14));
    }

    #[test]
    fn oracle_vanishes_under_orthogonality() {
        // x2 orthogonal to both f and z.
        let x1 = [1.0, 2.0, 0.0, -1.0];
        let x2 = [1.0, -1.0, 1.0, -1.0];
        let z = [1.0, 1.0, 0.0, 0.0];
        let f = [2.0, 2.0, 5.0, 5.0];
        assert_eq!(bias_beta2_oracle(&x1, &x2, &z, &f).unwrap(), 0.0);
        assert_eq!(bias_beta2_oracle(&x1, &x2, &[0.0, 0.0, 1.0, 1.0], &[0.0; 4]).unwrap(), 0.0);
        assert!(bias_beta2_oracle(&x1, &x2, &z, &f[..3]).is_err());
    }

    #[test]
    fn oracle_is_gram_determinant_times_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let n = 15;
            let x = normals(n, &mut rng);
            let z = normals(n, &mut rng);
            let f = normals(n, &mut rng);
            // x1: projection of x on a random 3-column basis; x2 the remainder.
            let h = DMatrix::from_fn(n, 3, |_, _| StandardNormal.sample(&mut rng));
            let q = linalg::orthonormalize(&h).unwrap();
            let xv = DVector::from_column_slice(&x);
            let x1 = &q * (q.transpose() * &xv);
            let x2 = &xv - &x1;
            let d = DMatrix::from_fn(n, 3, |i, j| [x1[i], x2[i], z[i]][j]);
            let g = d.transpose() * &d;
            let exact = (g.clone().try_inverse().unwrap() * d.transpose() * DVector::from_column_slice(&f))[1];
            let oracle = bias_beta2_oracle(x1.as_slice(), x2.as_slice(), &z, &f).unwrap();
            assert!((oracle / g.determinant() - exact).abs() < 1e-9 * (1.0 + exact.abs()));
        }
    }
}
