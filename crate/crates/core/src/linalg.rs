//! Dense linear algebra used by every other module.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration. It is slow compared to
//! LAPACK but fully deterministic and accurate to a few ulps, which is what
//! the certification code needs.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Default relative threshold for treating a singular value as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

const MAX_SWEEPS: usize = 80;

/// Full singular value decomposition `a = u * diag(sigma) * v^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// n x n orthogonal.
    pub u: Array2<f64>,
    /// min(n, d) values, descending, nonnegative.
    pub sigma: Array1<f64>,
    /// d x d orthogonal.
    pub v: Array2<f64>,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Array2<f64> {
        let k = self.sigma.len();
        let mut us = self.u.slice(s![.., ..k]).to_owned();
        for (j, mut col) in us.columns_mut().into_iter().enumerate() {
            col *= self.sigma[j];
        }
        us.dot(&self.v.slice(s![.., ..k]).t())
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma.first().copied().unwrap_or(0.0)
    }

    /// Number of singular values above `tol * sigma_max`.
    pub fn rank(&self, tol: f64) -> usize {
        let smax = self.sigma_max();
        if smax == 0.0 {
            return 0;
        }
        self.sigma.iter().filter(|&&s| s > tol * smax).count()
    }
}

fn check_finite(a: &ArrayView2<f64>) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput("matrix has non-finite entries".into()))
    }
}

/// Full SVD of an arbitrary finite matrix.
pub fn svd(a: &Array2<f64>) -> Result<SvdResult> {
    svd_view(a.view())
}

pub fn svd_view(a: ArrayView2<f64>) -> Result<SvdResult> {
    check_finite(&a)?;
    let (n, d) = a.dim();
    if n >= d {
        let (u, sigma, v) = jacobi_tall(a);
        Ok(SvdResult { u, sigma, v })
    } else {
        let (u, sigma, v) = jacobi_tall(a.t());
        Ok(SvdResult { u: v, sigma, v: u })
    }
}

/// Singular values only, descending; skips forming the singular vectors.
pub fn singular_values(a: &Array2<f64>) -> Result<Array1<f64>> {
    let v = a.view();
    check_finite(&v)?;
    let v = if v.nrows() >= v.ncols() { v } else { v.t() };
    let (cols, _) = jacobi_rotations(v, false);
    let mut sigma: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(Array1::from(sigma))
}

/// Orthogonalizes the columns of a tall matrix by plane rotations; returns the
/// rotated columns and, if requested, the accumulated rotation columns.
fn jacobi_rotations(a: ArrayView2<f64>, track_v: bool) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (m, n) = a.dim();
    // Work column-major: cols[j] is column j.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j).to_vec()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..if track_v { n } else { 0 })
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let eps = f64::EPSILON * (m.max(1) as f64);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for i in 0..m {
                        al += cp[i] * cp[i];
                        be += cq[i] * cq[i];
                        ga += cp[i] * cq[i];
                    }
                    (al, be, ga)
                };
                if alpha == 0.0 || beta == 0.0 || gamma == 0.0 {
                    continue;
                }
                if gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = c * t;
                rotate(&mut cols, p, q, c, sn);
                if track_v {
                    rotate(&mut vcols, p, q, c, sn);
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (cols, vcols)
}

/// One-sided Jacobi on a tall matrix (rows >= cols).
fn jacobi_tall(a: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
    let (m, n) = a.dim();
    let (cols, vcols) = jacobi_rotations(a, true);
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let smax = order.first().map(|&i| norms[i]).unwrap_or(0.0);
    let zero_tol = smax * f64::EPSILON * (m.max(n) as f64) * 4.0;
    let mut sigma = Array1::zeros(n);
    let mut v = Array2::zeros((n, n));
    let mut u_cols: Vec<Array1<f64>> = Vec::with_capacity(m);
    for (k, &j) in order.iter().enumerate() {
        sigma[k] = norms[j];
        for i in 0..n {
            v[[i, k]] = vcols[j][i];
        }
        if norms[j] > zero_tol && norms[j] > 0.0 && u_cols.len() == k {
            let col = Array1::from_iter(cols[j].iter().map(|x| x / norms[j]));
            u_cols.push(col);
        }
    }
    let u = complete_basis(u_cols, m);
    (u, sigma, v)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for i in 0..cp.len() {
        let x = cp[i];
        let y = cq[i];
        cp[i] = c * x - s * y;
        cq[i] = s * x + c * y;
    }
}

/// Extends orthonormal columns to a full orthonormal basis of R^m.
fn complete_basis(cols: Vec<Array1<f64>>, m: usize) -> Array2<f64> {
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(m);
    for c in cols {
        // re-orthogonalise; a column that collapses is replaced by a completion vector
        match orthogonalize(&basis, c) {
            Some(v) => basis.push(v),
            None => {
                let v = completion_vector(&basis, m);
                basis.push(v);
            }
        }
    }
    // one Gram-Schmidt pass over the standard basis; the residuals' squared norms sum
    // to the missing dimension, so a pass almost always completes the basis
    for i in 0..m {
        if basis.len() == m {
            break;
        }
        let mut e = Array1::zeros(m);
        e[i] = 1.0;
        if let Some(v) = orthogonalize_above(&basis, e, 1e-3) {
            basis.push(v);
        }
    }
    while basis.len() < m {
        let v = completion_vector(&basis, m);
        basis.push(v);
    }
    let mut u = Array2::zeros((m, m));
    for (j, c) in basis.iter().enumerate() {
        u.column_mut(j).assign(c);
    }
    u
}

/// Standard basis vector with the largest residual against `basis`, orthonormalised.
fn completion_vector(basis: &[Array1<f64>], m: usize) -> Array1<f64> {
    let mut best: Option<(f64, Array1<f64>)> = None;
    for i in 0..m {
        let mut e = Array1::zeros(m);
        e[i] = 1.0;
        let r = project_out(basis, e);
        let r = project_out(basis, r);
        let nr = r.dot(&r).sqrt();
        if best.as_ref().is_none_or(|(b, _)| nr > *b + 1e-12) {
            best = Some((nr, r));
        }
    }
    let (nr, r) = best.expect("m > 0");
    r / nr
}

fn project_out(basis: &[Array1<f64>], mut v: Array1<f64>) -> Array1<f64> {
    for b in basis {
        let c = b.dot(&v);
        v.scaled_add(-c, b);
    }
    v
}

fn orthogonalize(basis: &[Array1<f64>], v: Array1<f64>) -> Option<Array1<f64>> {
    orthogonalize_above(basis, v, 1e-8)
}

fn orthogonalize_above(basis: &[Array1<f64>], v: Array1<f64>, min_norm: f64) -> Option<Array1<f64>> {
    let v = project_out(basis, v);
    let v = project_out(basis, v);
    let n = v.dot(&v).sqrt();
    if n < min_norm {
        None
    } else {
        Some(v / n)
    }
}

/// Moore-Penrose pseudo-inverse; singular values at or below `tol * sigma_max` are dropped.
pub fn pinv(a: &Array2<f64>, tol: f64) -> Result<Array2<f64>> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("pinv tolerance must be positive, got {tol}")));
    }
    let f = svd(a)?;
    let (n, d) = a.dim();
    let r = f.rank(tol);
    let mut out = Array2::zeros((d, n));
    for k in 0..r {
        let vk = f.v.column(k);
        let uk = f.u.column(k);
        let inv = 1.0 / f.sigma[k];
        for i in 0..d {
            let vi = vk[i] * inv;
            if vi == 0.0 {
                continue;
            }
            for j in 0..n {
                out[[i, j]] += vi * uk[j];
            }
        }
    }
    Ok(out)
}

pub fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn frobenius_sq(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>()
}

pub fn norm(v: ArrayView1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn spectral_norm(a: &Array2<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    singular_values(a).map(|s| s[0]).unwrap_or(f64::NAN)
}

pub fn nuclear_norm(a: &Array2<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    singular_values(a).map(|s| s.sum()).unwrap_or(f64::NAN)
}

/// Singular value soft-thresholding `U (S - tau)_+ V^T`.
pub fn svt(a: &Array2<f64>, tau: f64) -> Result<Array2<f64>> {
    let f = svd(a)?;
    let mut out = Array2::zeros(a.dim());
    for k in 0..f.sigma.len() {
        let s = f.sigma[k] - tau;
        if s <= 0.0 {
            break;
        }
        let uk = f.u.column(k);
        let vk = f.v.column(k);
        for i in 0..out.nrows() {
            let ui = uk[i] * s;
            for j in 0..out.ncols() {
                out[[i, j]] += ui * vk[j];
            }
        }
    }
    Ok(out)
}

/// Outer product `a b^T`.
pub fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            out[[i, j]] = ai * bj;
        }
    }
    out
}

/// Orthonormal basis (as columns) for the column span of `a`.
pub fn orthonormal_columns(a: &Array2<f64>, tol: f64) -> Result<Array2<f64>> {
    let f = svd(a)?;
    let r = f.rank(tol);
    Ok(f.u.slice(s![.., ..r]).to_owned())
}

pub fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub fn identity(n: usize) -> Array2<f64> {
    Array2::eye(n)
}

/// Column means of `a` (mean over rows).
pub fn column_means(a: &Array2<f64>) -> Array1<f64> {
    a.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(a.ncols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn diagonal_values() {
        let f = svd(&array![[3.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!((f.sigma[0] - 3.0).abs() < 1e-15);
        assert!((f.sigma[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn permutation_values() {
        let f = svd(&array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert!((f.sigma[0] - 1.0).abs() < 1e-15);
        assert!((f.sigma[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_nan() {
        assert!(matches!(svd(&array![[f64::NAN]]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_matrix_has_full_bases() {
        let f = svd(&Array2::zeros((3, 2))).unwrap();
        assert_eq!(f.sigma.to_vec(), vec![0.0, 0.0]);
        let utu = f.u.t().dot(&f.u);
        assert!(max_abs(&(utu - Array2::<f64>::eye(3))) < 1e-14);
    }

    #[test]
    fn pinv_diag() {
        let p = pinv(&array![[2.0, 0.0], [0.0, 0.0]], 1e-8).unwrap();
        assert_eq!(p, array![[0.5, 0.0], [0.0, 0.0]]);
        assert!(pinv(&array![[1.0]], 0.0).is_err());
    }

    #[test]
    fn svt_shrinks() {
        let z = svt(&array![[3.0, 0.0], [0.0, 1.0]], 2.0).unwrap();
        assert!(max_abs(&(z - array![[1.0, 0.0], [0.0, 0.0]])) < 1e-15);
    }
}
