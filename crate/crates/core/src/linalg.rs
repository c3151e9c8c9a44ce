//! Dense linear-algebra helpers shared by the basis and inference modules.

use nalgebra::{DMatrix, DMatrixView, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Relative singular-value threshold below which a column counts as dependent.
pub(crate) const RANK_TOL: f64 = 1e-10;

/// Gram-Schmidt with re-orthogonalisation that keeps columns in order and
/// drops those that are numerically dependent on earlier ones.
///
/// Returns the orthonormal factor of the kept columns and their indices.
pub(crate) fn guarded_orthonormalize(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<usize>) {
    let n = a.nrows();
    let max_norm = a.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let mut q_cols: Vec<DVector<f64>> = Vec::with_capacity(a.ncols());
    let mut kept = Vec::with_capacity(a.ncols());
    for (j, col) in a.column_iter().enumerate() {
        let own = col.norm();
        let mut v = col.clone_owned();
        for _ in 0..2 {
            for q in &q_cols {
                let d = q.dot(&v);
                v.axpy(-d, q, 1.0);
            }
        }
        let r = v.norm();
        if r <= RANK_TOL * max_norm || r <= 1e-8 * own || own == 0.0 {
            continue;
        }
        q_cols.push(v / r);
        kept.push(j);
    }
    let q = if q_cols.is_empty() { DMatrix::zeros(n, 0) } else { DMatrix::from_columns(&q_cols) };
    (q, kept)
}

/// Orthonormal basis for the column space; errors on rank deficiency.
pub(crate) fn orthonormalize(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (q, kept) = guarded_orthonormalize(a);
    if kept.len() < a.ncols() {
        return Err(Error::RankDeficient { rank: kept.len(), cols: a.ncols() });
    }
    Ok(q)
}

/// Dense symmetric eigendecomposition, pairs ordered by decreasing
/// magnitude; ties keep ascending-eigenvalue order.
pub(crate) fn dense_top_eigen(a: &DMatrix<f64>, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    order.sort_by(|&i, &j| eig.eigenvalues[j].abs().total_cmp(&eig.eigenvalues[i].abs()));
    order.truncate(k);
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_columns(&order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>());
    (values, vectors)
}

const DENSE_CUTOFF: usize = 800;
const BLOCK: usize = 8;
const KRYLOV_TOL: f64 = 1e-11;

/// The `k` eigenpairs of largest magnitude of a symmetric matrix.
///
/// Small problems go straight to a dense solver. Larger ones use block
/// Lanczos with full re-orthogonalisation and Rayleigh-Ritz extraction; the
/// block size lets repeated eigenvalues (up to multiplicity eight) resolve.
pub(crate) fn top_eigen(a: &DMatrix<f64>, k: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if n <= DENSE_CUTOFF || 4 * k + 4 * BLOCK >= n {
        return Ok(dense_top_eigen(a, k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_e16e);
    let mut q_buf: Vec<f64> = Vec::with_capacity(n * (4 * k + 8 * BLOCK));
    let mut aq_buf: Vec<f64> = Vec::with_capacity(n * (4 * k + 8 * BLOCK));
    // Projected matrix Q^T A Q, grown block by block.
    let mut t_cols: Vec<Vec<f64>> = Vec::new();

    let start = DMatrix::from_fn(n, BLOCK, |_, _| StandardNormal.sample(&mut rng));
    let added = append_orthonormal(&mut q_buf, n, start, &mut rng);
    debug_assert_eq!(added, BLOCK);

    let mut used = 0usize;
    let mut since_check = 0usize;
    loop {
        let total = q_buf.len() / n;
        let qb = DMatrixView::from_slice(&q_buf[used * n..total * n], n, total - used);
        let w = a * qb;
        aq_buf.extend_from_slice(w.as_slice());
        // Extend the projected matrix with the new block of columns.
        let q_all = DMatrixView::from_slice(&q_buf[..total * n], n, total);
        let proj = q_all.transpose() * &w;
        for c in 0..proj.ncols() {
            t_cols.push(proj.column(c).iter().copied().collect());
        }
        used = total;
        since_check += 1;

        if used >= k + 2 * BLOCK && since_check >= 2 {
            since_check = 0;
            if let Some(result) = rayleigh_ritz(&q_buf, &aq_buf, &t_cols, n, used, k) {
                return Ok(result);
            }
        }
        if used + BLOCK >= n {
            log::debug!("block Krylov exhausted at {used} vectors; using dense solver");
            return Ok(dense_top_eigen(a, k));
        }
        let added = append_orthonormal(&mut q_buf, n, w, &mut rng);
        if added == 0 {
            return Err(Error::NoConvergence(used));
        }
    }
}

fn rayleigh_ritz(
    q_buf: &[f64],
    aq_buf: &[f64],
    t_cols: &[Vec<f64>],
    n: usize,
    d: usize,
    k: usize,
) -> Option<(Vec<f64>, DMatrix<f64>)> {
    let t = DMatrix::from_fn(d, d, |i, j| match (t_cols[j].get(i), t_cols[i].get(j)) {
        (Some(a), Some(b)) => 0.5 * (a + b),
        (Some(a), None) | (None, Some(a)) => *a,
        (None, None) => unreachable!("projected matrix entry ({i}, {j}) missing"),
    });
    let (theta, s) = dense_top_eigen(&t, k);
    let q = DMatrixView::from_slice(&q_buf[..d * n], n, d);
    let aq = DMatrixView::from_slice(&aq_buf[..d * n], n, d);
    let y = q * &s;
    let ay = aq * &s;
    let scale = theta[0].abs();
    for (j, th) in theta.iter().enumerate() {
        let res = (ay.column(j) - y.column(j) * *th).norm();
        if res > KRYLOV_TOL * scale * (n as f64).sqrt() {
            return None;
        }
    }
    Some((theta, y))
}

/// Orthogonalises the columns of `block` against the stored basis and each
/// other, appending the survivors; dependent columns are replaced by random
/// directions. Returns the number of columns appended.
fn append_orthonormal(q_buf: &mut Vec<f64>, n: usize, block: DMatrix<f64>, rng: &mut ChaCha8Rng) -> usize {
    let mut added = 0;
    for c in 0..block.ncols() {
        let mut v = block.column(c).into_owned();
        let mut tries = 0;
        loop {
            let norm0 = v.norm();
            let total = q_buf.len() / n;
            if total >= n {
                return added;
            }
            for _ in 0..2 {
                let q = DMatrixView::from_slice(&q_buf[..total * n], n, total);
                let coeff = q.transpose() * &v;
                v -= q * coeff;
            }
            let norm = v.norm();
            if norm > 1e-10 * norm0 && norm > 0.0 {
                v /= norm;
                q_buf.extend_from_slice(v.as_slice());
                added += 1;
                break;
            }
            tries += 1;
            if tries > 3 {
                break;
            }
            v = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        }
    }
    added
}
