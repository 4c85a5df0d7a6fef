//! Nuclear-norm regularized regression and the matching projection onto the
//! dual-feasible set `{ Λ : σ_max(Xᵀ Λ) ≤ μ }`.
//!
//! For `Z* = argmin ½‖X Z − Y‖² + μ ‖Z‖_*` the residual `Y − X Z*` is exactly
//! that projection of `Y`, so both are produced by one solve.

use ndarray::{s, Array1, Array2};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_sq, nuclear_norm, pinv, spectral_norm, svd, svt, DEFAULT_RANK_TOL};

const FISTA_MAX_ITERS: usize = 200_000;
const GAP_TOL: f64 = 1e-14;

/// Solution of the regularized problem together with its certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct NuclearFit {
    /// d x K minimizer.
    pub z: Array2<f64>,
    /// n x K dual point, feasible for `σ_max(Xᵀ Λ) ≤ μ`.
    pub lambda: Array2<f64>,
    /// Primal minus dual value of the regression problem (zero for the exact paths).
    pub gap: f64,
    pub iterations: usize,
}

struct Basis {
    u_r: Array2<f64>,
    v_r: Array2<f64>,
    sigma: Array1<f64>,
}

fn range_basis(x: &Array2<f64>) -> Result<Basis> {
    let f = svd(x)?;
    let r = f.rank(DEFAULT_RANK_TOL);
    Ok(Basis {
        u_r: f.u.slice(s![.., ..r]).to_owned(),
        v_r: f.v.slice(s![.., ..r]).to_owned(),
        sigma: f.sigma.slice(s![..r]).to_owned(),
    })
}

fn scale_rows(m: &Array2<f64>, d: &Array1<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for (mut row, s) in out.rows_mut().into_iter().zip(d.iter()) {
        row *= *s;
    }
    out
}

/// Solves `min ½‖X Z − Y‖² + μ ‖Z‖_*` (with `‖·‖_*` the Euclidean norm when Y has
/// one column). `μ = 0` returns the minimum-norm least-squares solution.
pub fn nuclear_regression(x: &Array2<f64>, y: &Array2<f64>, mu: f64) -> Result<NuclearFit> {
    if x.nrows() != y.nrows() {
        return Err(Error::ShapeError(format!("x has {} rows, target {}", x.nrows(), y.nrows())));
    }
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::InvalidInput(format!("regularization must be finite and >= 0, got {mu}")));
    }
    let (d, k) = (x.ncols(), y.ncols());
    if mu == 0.0 {
        let z = pinv(x, DEFAULT_RANK_TOL)?.dot(y);
        let lambda = y - &x.dot(&z);
        return Ok(NuclearFit { z, lambda, gap: 0.0, iterations: 0 });
    }
    let basis = range_basis(x)?;
    let r = basis.sigma.len();
    if r == 0 {
        return Ok(NuclearFit { z: Array2::zeros((d, k)), lambda: y.clone(), gap: 0.0, iterations: 0 });
    }
    let yt = basis.u_r.t().dot(y);
    let (b, iterations) = if k == 1 {
        (secular(&basis.sigma, &yt, mu), 0)
    } else if basis.sigma[0] - basis.sigma[r - 1] <= 1e-14 * basis.sigma[0] {
        let s = basis.sigma[0];
        (svt(&(&yt / s), mu / (s * s))?, 0)
    } else {
        fista(&basis.sigma, &yt, mu)?
    };
    let z = basis.v_r.dot(&b);
    // Dual point: residual in the range of X, scaled onto the feasible set.
    let res_r = &yt - &scale_rows(&b, &basis.sigma);
    let smax = spectral_norm(&scale_rows(&res_r, &basis.sigma));
    let theta = if smax > mu { mu / smax } else { 1.0 };
    let y_perp = y - &basis.u_r.dot(&yt);
    let lambda = y_perp + basis.u_r.dot(&(&res_r * theta));
    let primal = 0.5 * frobenius_sq(&res_r) + mu * nuclear_norm(&b);
    let dual = -0.5 * frobenius_sq(&(&res_r * theta - &yt)) + 0.5 * frobenius_sq(&yt);
    Ok(NuclearFit { z, lambda, gap: primal - dual, iterations })
}

/// Exact single-output solve: `b_i = σ_i ỹ_i / (σ_i² + κ)` with κ chosen so
/// that `κ ‖b(κ)‖ = μ`.
fn secular(sigma: &Array1<f64>, yt: &Array2<f64>, mu: f64) -> Array2<f64> {
    let r = sigma.len();
    let g: f64 = (0..r).map(|i| (sigma[i] * yt[[i, 0]]).powi(2)).sum::<f64>().sqrt();
    if g <= mu {
        return Array2::zeros((r, 1));
    }
    let b_of = |kappa: f64| -> Array1<f64> { Array1::from_shape_fn(r, |i| sigma[i] * yt[[i, 0]] / (sigma[i] * sigma[i] + kappa)) };
    let phi = |kappa: f64| kappa * b_of(kappa).dot(&b_of(kappa)).sqrt() - mu;
    let mut lo = 0.0;
    let mut hi = 1.0;
    while phi(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if phi(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let b = b_of(0.5 * (lo + hi));
    b.into_shape_with_order((r, 1)).expect("column")
}

/// Accelerated proximal gradient on `½‖Σ B − Ỹ‖² + μ‖B‖_*` with
/// gradient-based momentum restart, stopped by the duality gap or once the
/// iterates stop moving.
fn fista(sigma: &Array1<f64>, yt: &Array2<f64>, mu: f64) -> Result<(Array2<f64>, usize)> {
    let step = 1.0 / (sigma[0] * sigma[0]);
    let sq = sigma.mapv(|s| s * s);
    let sy = scale_rows(yt, sigma);
    let ynorm = 0.5 * frobenius_sq(yt);
    let mut b = scale_rows(yt, &sigma.mapv(|s| 1.0 / s));
    let mut yk = b.clone();
    let mut tk = 1.0_f64;
    let mut still = 0;
    for it in 1..=FISTA_MAX_ITERS {
        let grad = &scale_rows(&yk, &sq) - &sy;
        let next = svt(&(&yk - &(&grad * step)), mu * step)?;
        let moved = &next - &b;
        let restart = (&yk - &next).iter().zip(moved.iter()).map(|(a, c)| a * c).sum::<f64>() > 0.0;
        if restart {
            tk = 1.0;
            yk = next.clone();
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
            yk = &next + &(&moved * ((tk - 1.0) / t_next));
            tk = t_next;
        }
        let delta = frobenius_sq(&moved).sqrt();
        let scale = frobenius_sq(&next).sqrt();
        b = next;
        still = if delta <= 4.0 * f64::EPSILON * (1.0 + scale) { still + 1 } else { 0 };
        if it % 10 == 0 || still >= 20 {
            let res = yt - &scale_rows(&b, sigma);
            let smax = spectral_norm(&scale_rows(&res, sigma));
            let theta = if smax > mu { mu / smax } else { 1.0 };
            let primal = 0.5 * frobenius_sq(&res) + mu * nuclear_norm(&b);
            let dual = -0.5 * frobenius_sq(&(&res * theta - yt)) + ynorm;
            if primal - dual <= GAP_TOL * (1.0 + primal.abs()) || still >= 20 {
                return Ok((b, it));
            }
        }
    }
    Ok((b, FISTA_MAX_ITERS))
}

/// Projection of `target` onto `{ Λ : σ_max(xᵀ Λ) ≤ beta }` (the Euclidean
/// ball `‖xᵀ λ‖ ≤ beta` for a single column).
pub fn projection_ball(x: &Array2<f64>, target: &Array2<f64>, beta: f64) -> Result<Array2<f64>> {
    if !(beta > 0.0) {
        return Err(Error::InvalidInput(format!("projection radius must be positive, got {beta}")));
    }
    Ok(nuclear_regression(x, target, beta)?.lambda)
}
