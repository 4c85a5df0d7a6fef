//! Dual objectives, worst-case dual constraints and duality-gap certificates.
//!
//! Sign convention: the regularized dual is written as
//! `max −½‖Λ − Y‖² + ½‖Y‖²` subject to `worst_constraint(Λ) ≤ β`. The Fenchel
//! derivation produces the same problem in `−Λ`; every function here uses the
//! form above. The minimum-norm dual is `max tr(Λᵀ Y)` subject to
//! `worst_constraint(Λ) ≤ 1`.

use ndarray::{Array1, Array2, Axis};

use crate::closedform::{nuclear_regression, projection_ball};
use crate::error::{Error, Result};
use crate::forward::{canonical_objective, path_penalty, predict};
use crate::linalg::{frobenius, frobenius_sq, norm, pinv, spectral_norm, svd, DEFAULT_RANK_TOL};
use crate::types::{Activation, Architecture, Dataset, NetworkParams};

/// Largest `n` accepted by the pattern enumerations.
pub const MAX_BRUTE_FORCE_N: usize = 20;

/// Relative slack allowed on the dual constraint.
pub const FEASIBILITY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DualForm {
    /// `tr(Λᵀ Y)`, constraint bound 1.
    MinNorm,
    /// `−½‖Λ − Y‖² + ½‖Y‖²`, constraint bound β.
    Regularized,
}

impl DualForm {
    pub fn for_beta(beta: f64) -> Self {
        if beta == 0.0 {
            DualForm::MinNorm
        } else {
            DualForm::Regularized
        }
    }
}

/// The family of hidden features a dual constraint ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    Linear,
    BatchNorm,
    WhitenedRelu,
    RankOneRelu { bias: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualCertificate {
    pub lambda: Array2<f64>,
    pub beta: f64,
    /// Inner-layer radius the constraint was evaluated at.
    pub radius: f64,
    pub form: DualForm,
    pub worst_constraint: f64,
    pub dual_value: f64,
    pub primal_value: Option<f64>,
    pub gap: Option<f64>,
    /// Classes whose constraint is active (one-hot settings).
    pub active_set: Vec<usize>,
}

impl DualCertificate {
    pub fn bound(&self) -> f64 {
        match self.form {
            DualForm::MinNorm => 1.0,
            DualForm::Regularized => self.beta,
        }
    }

    pub fn feasible(&self) -> bool {
        self.worst_constraint <= self.bound() * (1.0 + FEASIBILITY_SLACK)
    }

    /// `|gap| / (1 + |primal|)`.
    pub fn relative_gap(&self) -> Option<f64> {
        match (self.gap, self.primal_value) {
            (Some(g), Some(p)) => Some(g.abs() / (1.0 + p.abs())),
            _ => None,
        }
    }
}

fn check_lambda(lambda: &Array2<f64>, dataset: &Dataset) -> Result<()> {
    if lambda.dim() != dataset.labels.dim() {
        return Err(Error::ShapeError(format!("dual variable {:?} vs labels {:?}", lambda.dim(), dataset.labels.dim())));
    }
    Ok(())
}

pub fn dual_objective(lambda: &Array2<f64>, dataset: &Dataset, form: DualForm) -> Result<f64> {
    check_lambda(lambda, dataset)?;
    let y = &dataset.labels;
    Ok(match form {
        DualForm::MinNorm => (lambda * y).sum(),
        DualForm::Regularized => -0.5 * frobenius_sq(&(lambda - y)) + 0.5 * frobenius_sq(y),
    })
}

/// Which dual construction applies to this architecture and data.
pub fn classify(arch: &Architecture, dataset: &Dataset) -> Result<Setting> {
    if arch.batch_norm {
        return Ok(Setting::BatchNorm);
    }
    match arch.activation {
        Activation::Linear if arch.last_hidden_bias => Err(Error::NoDualConstruction("linear net with bias".into())),
        Activation::Linear => Ok(Setting::Linear),
        Activation::Relu => {
            if dataset.rank_one.is_some() {
                Ok(Setting::RankOneRelu { bias: arch.last_hidden_bias })
            } else if dataset.whitened && !arch.last_hidden_bias {
                Ok(Setting::WhitenedRelu)
            } else {
                Err(Error::NoDualConstruction("relu features that are neither whitened nor rank-one".into()))
            }
        }
    }
}

/// `max ‖Λᵀ v‖` over nonnegative unit `v`.
///
/// Closed form when every row of Λ has at most one nonzero entry, otherwise
/// the support enumeration of [`nonneg_sphere_max_brute`].
pub fn nonneg_sphere_max(lambda: &Array2<f64>) -> Result<f64> {
    let disjoint = lambda.rows().into_iter().all(|r| r.iter().filter(|&&v| v != 0.0).count() <= 1);
    if disjoint {
        return Ok(nonneg_sphere_max_disjoint(lambda));
    }
    nonneg_sphere_max_brute(lambda)
}

/// Closed form for columns with disjoint supports: `max_k max(‖(λ_k)₊‖, ‖(λ_k)₋‖)`.
pub fn nonneg_sphere_max_disjoint(lambda: &Array2<f64>) -> f64 {
    lambda
        .columns()
        .into_iter()
        .map(|c| {
            let p = c.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
            let m = c.iter().map(|v| (-v).max(0.0).powi(2)).sum::<f64>().sqrt();
            p.max(m)
        })
        .fold(0.0, f64::max)
}

/// Enumerates every support `S`; on each, the maximizer is a left singular
/// vector of the rows `Λ_S` with entries of one sign.
pub fn nonneg_sphere_max_brute(lambda: &Array2<f64>) -> Result<f64> {
    let n = lambda.nrows();
    if n > MAX_BRUTE_FORCE_N {
        return Err(Error::TooLargeForBruteForce(n));
    }
    let mut best = 0.0_f64;
    for mask in 1u32..(1u32 << n) {
        let rows: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let sub = lambda.select(Axis(0), &rows);
        let f = svd(&sub)?;
        for k in 0..f.sigma.len() {
            let s = f.sigma[k];
            if s <= best {
                continue;
            }
            let u = f.u.column(k);
            let tol = 1e-12;
            if u.iter().all(|&v| v >= -tol) || u.iter().all(|&v| v <= tol) {
                best = s;
            }
        }
    }
    Ok(best)
}

fn rectified(c: &Array1<f64>, sign: f64, shift: f64) -> Array1<f64> {
    c.mapv(|v| (sign * (v - shift)).max(0.0))
}

fn ones_slack(lambda: &Array2<f64>) -> f64 {
    let s = lambda.sum_axis(Axis(0));
    norm(s.view())
}

/// Closed-form worst constraint for rank-one features `c a0ᵀ` with feature
/// radius `radius = ‖a0‖ t^(L−2)`.
///
/// Without bias the features are `z c₊` and `z c₋`; with a free bias they are
/// the hinges `(±(c − c_i))₊`, and the value is infinite unless `Λᵀ 1 = 0`.
pub fn rank_one_extreme(lambda: &Array2<f64>, c: &Array1<f64>, radius: f64, bias: bool) -> f64 {
    let proj = |f: &Array1<f64>| norm(lambda.t().dot(f).view());
    if !bias {
        return radius * proj(&rectified(c, 1.0, 0.0)).max(proj(&rectified(c, -1.0, 0.0)));
    }
    let scale = 1.0 + frobenius(lambda);
    if ones_slack(lambda) > 1e-12 * scale * (c.len() as f64).sqrt() {
        return f64::INFINITY;
    }
    let mut best = 0.0_f64;
    for &ci in c.iter() {
        for s in [1.0, -1.0] {
            best = best.max(proj(&rectified(c, s, ci)));
        }
    }
    radius * best
}

/// Pattern-by-pattern oracle for [`rank_one_extreme`].
///
/// For each of the 2ⁿ activation patterns of `(z c + b 1)₊` the feature is
/// affine in `(z, b)` on a polygon (`|z| ≤ radius`, `b = 0` without bias), so
/// the convex objective peaks at one of its vertices.
pub fn rank_one_extreme_brute(lambda: &Array2<f64>, c: &Array1<f64>, radius: f64, bias: bool) -> Result<f64> {
    let n = c.len();
    if n > MAX_BRUTE_FORCE_N {
        return Err(Error::TooLargeForBruteForce(n));
    }
    if bias && ones_slack(lambda) > 1e-12 * (1.0 + frobenius(lambda)) * (n as f64).sqrt() {
        return Ok(f64::INFINITY);
    }
    // Lines a z + b' b = rhs bounding every pattern polygon.
    let mut lines: Vec<(f64, f64, f64)> = vec![(1.0, 0.0, radius), (1.0, 0.0, -radius)];
    if bias {
        lines.extend(c.iter().map(|&ci| (ci, 1.0, 0.0)));
    } else {
        lines.push((1.0, 0.0, 0.0));
        lines.push((0.0, 1.0, 0.0));
    }
    let mut vertices = Vec::new();
    for i in 0..lines.len() {
        for j in (i + 1)..lines.len() {
            let (a1, b1, r1) = lines[i];
            let (a2, b2, r2) = lines[j];
            let det = a1 * b2 - a2 * b1;
            if det.abs() < 1e-300 {
                continue;
            }
            let z = (r1 * b2 - r2 * b1) / det;
            let b = (a1 * r2 - a2 * r1) / det;
            if z.abs() <= radius * (1.0 + 1e-12) && (bias || b == 0.0) {
                vertices.push((z, b));
            }
        }
    }
    let cmax = c.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * (1.0 + radius * cmax);
    let mut best = 0.0_f64;
    for mask in 0u32..(1u32 << n) {
        for &(z, b) in &vertices {
            let fits = (0..n).all(|i| {
                let pre = z * c[i] + b;
                if mask & (1 << i) != 0 {
                    pre >= -tol
                } else {
                    pre <= tol
                }
            });
            if !fits {
                continue;
            }
            let v = Array1::from_shape_fn(n, |i| if mask & (1 << i) != 0 { z * c[i] + b } else { 0.0 });
            best = best.max(norm(lambda.t().dot(&v).view()));
        }
    }
    Ok(best)
}

fn depth_factor(t: f64, depth: usize) -> f64 {
    t.powi(depth as i32 - 2)
}

/// Worst-case value of the dual constraint for `lambda` at inner radius `t`.
pub fn dual_feasibility(lambda: &Array2<f64>, dataset: &Dataset, arch: &Architecture, t: f64) -> Result<f64> {
    check_lambda(lambda, dataset)?;
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidInput(format!("radius must be finite and >= 0, got {t}")));
    }
    let scale = depth_factor(t, arch.depth);
    match classify(arch, dataset)? {
        Setting::Linear => Ok(scale * spectral_norm(&dataset.x.t().dot(lambda))),
        Setting::BatchNorm => nonneg_sphere_max(lambda),
        Setting::WhitenedRelu => Ok(scale * nonneg_sphere_max(lambda)?),
        Setting::RankOneRelu { bias } => {
            let (c, a0) = dataset.rank_one.as_ref().expect("classified");
            if arch.depth >= 3 && c.iter().any(|&v| v < 0.0) {
                return Err(Error::PreconditionViolated("depth >= 3 needs a nonnegative data factor c".into()));
            }
            Ok(rank_one_extreme(lambda, c, norm(a0.view()) * scale, bias))
        }
    }
}

fn one_hot_norms(dataset: &Dataset) -> Result<Vec<f64>> {
    if !dataset.is_one_hot() {
        return Err(Error::PreconditionViolated("labels are not one-hot".into()));
    }
    Ok(dataset.labels.columns().into_iter().map(norm).collect())
}

/// Closed-form dual for one-hot labels with whitened or batch-normalized
/// features: `λ_k = μ y_k / ‖y_k‖` when `μ ≤ ‖y_k‖`, else `y_k`, with
/// `μ = β t^(2−L)`. For β = 0 this is the minimum-norm dual `t^(2−L) y_k / ‖y_k‖`.
pub fn optimal_dual(dataset: &Dataset, beta: f64, t: f64, depth: usize) -> Result<DualCertificate> {
    let norms = one_hot_norms(dataset)?;
    if !(t > 0.0) {
        return Err(Error::InvalidInput(format!("radius must be positive, got {t}")));
    }
    let scale = depth_factor(t, depth);
    let mu = beta / scale;
    let form = DualForm::for_beta(beta);
    let mut lambda = dataset.labels.clone();
    let mut active = Vec::new();
    for (k, &yn) in norms.iter().enumerate() {
        if yn == 0.0 {
            continue;
        }
        let target = match form {
            DualForm::MinNorm => Some(1.0 / scale),
            DualForm::Regularized if mu <= yn => Some(mu),
            DualForm::Regularized => None,
        };
        if let Some(m) = target {
            lambda.column_mut(k).mapv_inplace(|v| v * m / yn);
            active.push(k);
        }
    }
    let worst = scale * nonneg_sphere_max_disjoint(&lambda);
    let dual_value = dual_objective(&lambda, dataset, form)?;
    Ok(DualCertificate {
        lambda,
        beta,
        radius: t,
        form,
        worst_constraint: worst,
        dual_value,
        primal_value: None,
        gap: None,
        active_set: active,
    })
}

/// Optimal dual for any supported setting at inner radius `t`.
pub fn optimal_dual_for(arch: &Architecture, dataset: &Dataset, beta: f64, t: f64) -> Result<DualCertificate> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidInput(format!("beta must be finite and >= 0, got {beta}")));
    }
    let form = DualForm::for_beta(beta);
    let setting = classify(arch, dataset)?;
    let lambda = match setting {
        Setting::BatchNorm => return finish(optimal_dual(dataset, beta, 1.0, 2)?, arch, dataset, t),
        Setting::WhitenedRelu => {
            let mut cert = optimal_dual(dataset, beta, t.max(f64::MIN_POSITIVE), arch.depth)?;
            cert.radius = t;
            return finish(cert, arch, dataset, t);
        }
        Setting::Linear => linear_dual(dataset, beta, t, arch.depth)?,
        Setting::RankOneRelu { bias: false } => rank_one_dual(dataset, beta, t, arch.depth)?,
        Setting::RankOneRelu { bias: true } => {
            return Err(Error::NoDualConstruction("rank-one features with a free bias".into()))
        }
    };
    let dual_value = dual_objective(&lambda, dataset, form)?;
    let cert = DualCertificate {
        lambda,
        beta,
        radius: t,
        form,
        worst_constraint: 0.0,
        dual_value,
        primal_value: None,
        gap: None,
        active_set: Vec::new(),
    };
    finish(cert, arch, dataset, t)
}

fn finish(mut cert: DualCertificate, arch: &Architecture, dataset: &Dataset, t: f64) -> Result<DualCertificate> {
    cert.worst_constraint = dual_feasibility(&cert.lambda, dataset, arch, t)?;
    Ok(cert)
}

fn linear_dual(dataset: &Dataset, beta: f64, t: f64, depth: usize) -> Result<Array2<f64>> {
    let scale = depth_factor(t, depth);
    if beta > 0.0 {
        if scale == 0.0 {
            return Ok(dataset.labels.clone());
        }
        return projection_ball(&dataset.x, &dataset.labels, beta / scale);
    }
    let z = nuclear_regression(&dataset.x, &dataset.labels, 0.0)?.z;
    let f = svd(&z)?;
    let r = f.rank(DEFAULT_RANK_TOL);
    let mut polar = Array2::zeros(z.dim());
    for k in 0..r {
        polar += &crate::linalg::outer(f.u.column(k), f.v.column(k));
    }
    Ok(pinv(&dataset.x, DEFAULT_RANK_TOL)?.t().dot(&polar) / scale)
}

fn rank_one_dual(dataset: &Dataset, beta: f64, t: f64, depth: usize) -> Result<Array2<f64>> {
    let (c, a0) = dataset.rank_one.as_ref().expect("classified");
    let radius = norm(a0.view()) * depth_factor(t, depth);
    let y = &dataset.labels;
    let feats = [rectified(c, 1.0, 0.0), rectified(c, -1.0, 0.0)];
    if beta > 0.0 {
        let tau = beta / radius;
        let mut lambda = y.clone();
        for f in feats.iter().filter(|f| f.iter().any(|&v| v > 0.0)) {
            let ytf = y.t().dot(f);
            let yn = norm(ytf.view());
            if yn == 0.0 {
                continue;
            }
            let b = &ytf * ((1.0 - tau / yn).max(0.0) / f.dot(f));
            lambda -= &crate::linalg::outer(f.view(), b.view());
        }
        return Ok(lambda);
    }
    let mut lambda = Array2::zeros(y.dim());
    for f in feats.iter().filter(|f| f.iter().any(|&v| v > 0.0)) {
        let ytf = y.t().dot(f);
        let yn = norm(ytf.view());
        if yn == 0.0 {
            continue;
        }
        let u = &ytf / yn;
        lambda += &(crate::linalg::outer(f.view(), u.view()) / (radius * f.dot(f)));
    }
    Ok(lambda)
}

/// Inner radius of a parameter set: the recorded branch norms when present,
/// otherwise the largest per-branch geometric mean of inner Frobenius norms.
pub fn inner_radius(params: &NetworkParams, arch: &Architecture) -> f64 {
    if arch.depth < 3 || arch.batch_norm {
        return 1.0;
    }
    if let Some(t) = &params.branch_norms {
        return t.iter().cloned().fold(0.0, f64::max);
    }
    let inner = arch.depth - 2;
    params
        .weights
        .iter()
        .map(|w| (w[..inner].iter().map(|m| frobenius(m).ln()).sum::<f64>() / inner as f64).exp())
        .fold(0.0, f64::max)
}

/// Primal value matching `form`: the rescaled objective, or for β = 0 the path
/// penalty of an interpolating net (infinite when it does not interpolate).
pub fn certified_primal(params: &NetworkParams, arch: &Architecture, dataset: &Dataset, beta: f64) -> Result<f64> {
    if beta > 0.0 {
        return canonical_objective(params, arch, dataset, beta);
    }
    let out = predict(params, arch, &dataset.x)?;
    let res = frobenius(&(&out - &dataset.labels));
    if res > 1e-8 * (1.0 + frobenius(&dataset.labels)) {
        return Ok(f64::INFINITY);
    }
    Ok(path_penalty(params, arch))
}

/// Certifies `params` against a given dual point.
pub fn certify(
    params: &NetworkParams,
    arch: &Architecture,
    dataset: &Dataset,
    beta: f64,
    lambda: Array2<f64>,
) -> Result<DualCertificate> {
    let t = inner_radius(params, arch);
    let form = DualForm::for_beta(beta);
    let worst = dual_feasibility(&lambda, dataset, arch, t)?;
    let dual_value = dual_objective(&lambda, dataset, form)?;
    let primal = certified_primal(params, arch, dataset, beta)?;
    Ok(DualCertificate {
        lambda,
        beta,
        radius: t,
        form,
        worst_constraint: worst,
        dual_value,
        primal_value: Some(primal),
        gap: Some(primal - dual_value),
        active_set: Vec::new(),
    })
}

/// Gap between the params' objective and the optimal dual at the params' radius.
pub fn duality_gap(params: &NetworkParams, arch: &Architecture, dataset: &Dataset, beta: f64) -> Result<DualCertificate> {
    params.check(arch)?;
    let t = inner_radius(params, arch);
    let mut cert = optimal_dual_for(arch, dataset, beta, t)?;
    let primal = certified_primal(params, arch, dataset, beta)?;
    cert.primal_value = Some(primal);
    cert.gap = Some(primal - cert.dual_value);
    Ok(cert)
}

/// `{ j : β ≤ ‖y_j‖ }`.
pub fn active_set(dataset: &Dataset, beta: f64) -> Result<Vec<usize>> {
    Ok(one_hot_norms(dataset)?.into_iter().enumerate().filter(|(_, n)| beta <= *n).map(|(j, _)| j).collect())
}

/// `−½β²|E| + β Σ_{j∈E} ‖y_j‖ + ½ Σ_{j∉E} ‖y_j‖²` with `E` the active set.
pub fn optimum_value_formula(dataset: &Dataset, beta: f64) -> Result<f64> {
    let norms = one_hot_norms(dataset)?;
    Ok(norms
        .iter()
        .map(|&n| if beta <= n { -0.5 * beta * beta + beta * n } else { 0.5 * n * n })
        .sum())
}
