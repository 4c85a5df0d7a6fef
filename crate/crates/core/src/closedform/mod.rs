//! Constructors for optimal parameters of the regularized training problems.

mod chain;
mod projection;

pub use chain::{choose_t_star, make_chain, ChainMode, DirectionChain};
pub use projection::{nuclear_regression, projection_ball, NuclearFit};

use ndarray::{s, Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::linalg::{frobenius, frobenius_sq, norm, nuclear_norm, pinv, spectral_norm, svd, SvdResult, DEFAULT_RANK_TOL};
use crate::types::{Activation, Architecture, Dataset, NetworkParams};

/// Relative residual above which a target counts as unreachable.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Singular values below this fraction of the largest are dropped when
/// turning a solution matrix into branches.
const BRANCH_TOL: f64 = 1e-12;

/// How the common Frobenius norm of the inner layers is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Radius {
    /// t = 1.
    Unit,
    Fixed(f64),
    /// The radius minimizing the squared-norm objective; the returned
    /// factors are balanced so every layer of a branch carries the same norm.
    Optimal,
}

/// Least-squares solution and its rotated, rank-restricted form.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedFit {
    /// d x K minimum-norm least-squares solution.
    pub w_star: Array2<f64>,
    /// `[I_r 0; 0 0] V_xᵀ W*`.
    pub w_tilde_r: Array2<f64>,
    pub svd_w: SvdResult,
    pub r_w: usize,
    pub rank_x: usize,
}

pub fn fit_planted(dataset: &Dataset) -> Result<PlantedFit> {
    let x = &dataset.x;
    let w_star = pinv(x, DEFAULT_RANK_TOL)?.dot(&dataset.labels);
    let fx = svd(x)?;
    let rank_x = fx.rank(DEFAULT_RANK_TOL);
    let mut w_tilde_r = fx.v.t().dot(&w_star);
    w_tilde_r.slice_mut(s![rank_x.., ..]).fill(0.0);
    let svd_w = svd(&w_tilde_r)?;
    let r_w = svd_w.rank(DEFAULT_RANK_TOL);
    Ok(PlantedFit { w_star, w_tilde_r, svd_w, r_w, rank_x })
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidInput(format!("beta must be finite and >= 0, got {beta}")));
    }
    Ok(())
}

fn check_arch_matches(arch: &Architecture, dataset: &Dataset) -> Result<()> {
    arch.validate()?;
    if arch.input_dim != dataset.d() || arch.outputs != dataset.k() {
        return Err(Error::ShapeError(format!(
            "architecture is {} -> {}, dataset is {} -> {}",
            arch.input_dim,
            arch.outputs,
            dataset.d(),
            dataset.k()
        )));
    }
    Ok(())
}

fn relative_residual(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let scale = frobenius(b);
    let r = frobenius(&(a - b));
    if scale == 0.0 {
        r
    } else {
        r / scale
    }
}

/// Minimum-norm interpolant `pinv(X) Y`, or `Infeasible` when Y leaves the range of X.
fn min_norm_solution(dataset: &Dataset) -> Result<Array2<f64>> {
    let z = pinv(&dataset.x, DEFAULT_RANK_TOL)?.dot(&dataset.labels);
    let res = relative_residual(&dataset.x.dot(&z), &dataset.labels);
    if res > FEASIBILITY_TOL {
        return Err(Error::Infeasible(format!("labels are not in the range of x (relative residual {res:.3e})")));
    }
    Ok(z)
}

/// Significant rank-one terms `(s_k, u_k, v_k)` of `z`, with the sign fixed so
/// the largest entry of `v_k` is positive.
fn rank_one_terms(z: &Array2<f64>) -> Result<Vec<(f64, Array1<f64>, Array1<f64>)>> {
    let f = svd(z)?;
    let smax = f.sigma_max();
    let mut out = Vec::new();
    for k in 0..f.sigma.len() {
        let s = f.sigma[k];
        if smax == 0.0 || s <= BRANCH_TOL * smax {
            break;
        }
        let mut u = f.u.column(k).to_owned();
        let mut v = f.v.column(k).to_owned();
        let lead = v.iter().cloned().fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            u.mapv_inplace(|x| -x);
            v.mapv_inplace(|x| -x);
        }
        out.push((s, u, v));
    }
    Ok(out)
}

/// Architecture used by [`two_layer_linear`]: one width-one branch per output.
pub fn two_layer_linear_arch(dataset: &Dataset) -> Architecture {
    Architecture {
        depth: 2,
        branches: dataset.k(),
        input_dim: dataset.d(),
        widths: vec![1],
        activation: Activation::Linear,
        last_hidden_bias: false,
        batch_norm: false,
        outputs: dataset.k(),
    }
}

/// Optimal two-layer linear net on [`two_layer_linear_arch`].
///
/// β > 0 solves the nuclear-norm regularized regression; β = 0 interpolates
/// with the minimum nuclear norm. Each branch carries one singular triple with
/// its magnitude split evenly between the two layers.
pub fn two_layer_linear(dataset: &Dataset, beta: f64) -> Result<NetworkParams> {
    check_beta(beta)?;
    let arch = two_layer_linear_arch(dataset);
    let z = if beta == 0.0 {
        min_norm_solution(dataset)?
    } else {
        nuclear_regression(&dataset.x, &dataset.labels, beta)?.z
    };
    let mut p = NetworkParams::zeros(&arch);
    for (j, (sv, u, v)) in rank_one_terms(&z)?.into_iter().enumerate() {
        let r = sv.sqrt();
        p.weights[j][0].column_mut(0).assign(&(&u * r));
        p.head[j].row_mut(0).assign(&(&v * r));
    }
    Ok(p)
}

/// Minimizer over `m ≥ 0` of `½ q (m − g)² + w m^(2/L)`.
fn power_shrink(g: f64, q: f64, w: f64, depth: usize) -> f64 {
    if g <= 0.0 {
        return 0.0;
    }
    if w == 0.0 {
        return g;
    }
    if depth <= 2 {
        return (g - w / q).max(0.0);
    }
    let p = 2.0 / depth as f64;
    let obj = |m: f64| 0.5 * q * (m - g).powi(2) + w * m.powf(p);
    let deriv = |m: f64| q * (m - g) + w * p * m.powf(p - 1.0);
    let mc = (w * p * (1.0 - p) / q).powf(1.0 / (2.0 - p));
    if mc >= g || deriv(mc) >= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (mc, g);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if deriv(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let m = 0.5 * (lo + hi);
    if obj(m) <= obj(0.0) {
        m
    } else {
        0.0
    }
}

/// Writes one rank-one unit into branch `j`, column `col`.
///
/// `input` is the unit-norm first-layer direction, `dirs` the unit inner
/// directions, `t` the inner radius and `last` the norm of the last-hidden
/// column.
struct Unit<'a> {
    branch: usize,
    col: usize,
    input: ArrayView1<'a, f64>,
    dirs: &'a [Array1<f64>],
    t: f64,
    last: f64,
    head: Array1<f64>,
    bias: Option<f64>,
}

fn write_unit(p: &mut NetworkParams, arch: &Architecture, u: Unit<'_>) {
    let j = u.branch;
    let layers = arch.hidden_layers();
    if layers == 1 {
        p.weights[j][0].column_mut(u.col).assign(&(&u.input * u.last));
    } else {
        let first = crate::linalg::outer(u.input, u.dirs[0].view()) * u.t;
        p.weights[j][0] = first;
        for l in 1..layers - 1 {
            p.weights[j][l] = crate::linalg::outer(u.dirs[l - 1].view(), u.dirs[l].view()) * u.t;
        }
        p.weights[j][layers - 1].column_mut(u.col).assign(&(&u.dirs[layers - 2] * u.last));
    }
    p.head[j].row_mut(u.col).assign(&u.head);
    if let (Some(b), Some(bs)) = (u.bias, p.biases.as_mut()) {
        bs[j][u.col] = b;
    }
}

fn unit_dirs(chain: &DirectionChain, j: usize) -> Vec<Array1<f64>> {
    chain.dirs[j].iter().map(|d| d / norm(d.view())).collect()
}

fn radius_value(radius: Radius) -> Result<f64> {
    match radius {
        Radius::Unit => Ok(1.0),
        Radius::Fixed(t) if t > 0.0 && t.is_finite() => Ok(t),
        Radius::Fixed(t) => Err(Error::InvalidInput(format!("radius must be positive, got {t}"))),
        Radius::Optimal => Ok(1.0),
    }
}

fn check_chain(chain: &DirectionChain, arch: &Architecture) -> Result<()> {
    chain.check()?;
    if chain.dirs.len() < arch.branches
        || chain.dirs.iter().any(|c| c.len() != arch.depth - 2 || c.iter().zip(&arch.widths).any(|(d, &w)| d.len() != w))
    {
        return Err(Error::ShapeError("direction chain does not match the architecture".into()));
    }
    if chain.norms.contains(&0.0) {
        return Err(Error::InvalidInput("direction chain has a zero branch".into()));
    }
    Ok(())
}

/// Optimal deep linear net at the optimal inner radius.
pub fn deep_linear(dataset: &Dataset, beta: f64, arch: &Architecture) -> Result<NetworkParams> {
    deep_linear_with(dataset, beta, arch, Radius::Optimal, None)
}

/// Optimal deep linear net with an explicit radius rule and optional chain.
///
/// All branches share one inner radius `t`. At that radius the problem is a
/// nuclear-norm regression with weight `β t^(2−L)`; its solution is split
/// into one branch per singular triple.
pub fn deep_linear_with(
    dataset: &Dataset,
    beta: f64,
    arch: &Architecture,
    radius: Radius,
    chain: Option<&DirectionChain>,
) -> Result<NetworkParams> {
    check_beta(beta)?;
    check_arch_matches(arch, dataset)?;
    if arch.activation != Activation::Linear || arch.depth < 3 || arch.batch_norm || arch.last_hidden_bias {
        return Err(Error::PreconditionViolated("deep linear construction needs a plain linear net of depth >= 3".into()));
    }
    let default_chain;
    let chain = match chain {
        Some(c) => {
            check_chain(c, arch)?;
            c
        }
        None => {
            default_chain = make_chain(arch, ChainMode::NonnegOrthogonal, &vec![1.0; arch.branches], 0)?;
            &default_chain
        }
    };
    let depth = arch.depth;
    let (t, z) = match radius {
        Radius::Optimal => optimal_linear_radius(dataset, beta, depth)?,
        r => {
            let t = radius_value(r)?;
            let z = if beta == 0.0 {
                min_norm_solution(dataset)?
            } else {
                nuclear_regression(&dataset.x, &dataset.labels, beta * t.powi(2 - depth as i32))?.z
            };
            (t, z)
        }
    };
    let terms = rank_one_terms(&z)?;
    if terms.len() > arch.branches {
        return Err(Error::WidthTooSmall { width: arch.branches, needed: terms.len() });
    }
    let inner = t.powi(depth as i32 - 2);
    let mut p = NetworkParams::zeros(arch);
    let m = arch.last_width();
    for (j, (sv, u, v)) in terms.into_iter().enumerate() {
        let last = if radius == Radius::Optimal { (sv / inner).sqrt() } else { 1.0 };
        let dirs = unit_dirs(chain, j);
        write_unit(
            &mut p,
            arch,
            Unit {
                branch: j,
                col: if j < m { j } else { 0 },
                input: u.view(),
                dirs: &dirs,
                t,
                last,
                head: &v * (sv / (inner * last)),
                bias: None,
            },
        );
    }
    p.branch_norms = Some(vec![t; arch.branches]);
    Ok(p)
}

/// Objective of the deep linear problem when every active branch sits at radius `t`.
fn linear_radius_objective(dataset: &Dataset, beta: f64, depth: usize, t: f64) -> Result<(f64, Array2<f64>)> {
    let mu = beta * t.powi(2 - depth as i32);
    let z = nuclear_regression(&dataset.x, &dataset.labels, mu)?.z;
    let r = rank_one_terms(&z)?.len() as f64;
    let loss = 0.5 * frobenius_sq(&(dataset.x.dot(&z) - &dataset.labels));
    let j = loss + mu * nuclear_norm(&z) + 0.5 * beta * (depth as f64 - 2.0) * r * t * t;
    Ok((j, z))
}

/// Stationarity residual `t^L − ‖Z(t)‖_* / r` of the radius objective.
fn radius_residual(dataset: &Dataset, beta: f64, depth: usize, t: f64) -> Result<f64> {
    let z = nuclear_regression(&dataset.x, &dataset.labels, beta * t.powi(2 - depth as i32))?.z;
    let r = rank_one_terms(&z)?.len();
    if r == 0 {
        return Ok(t.powi(depth as i32));
    }
    Ok(t.powi(depth as i32) - nuclear_norm(&z) / r as f64)
}

fn optimal_linear_radius(dataset: &Dataset, beta: f64, depth: usize) -> Result<(f64, Array2<f64>)> {
    if beta == 0.0 {
        let z = min_norm_solution(dataset)?;
        let r = rank_one_terms(&z)?.len();
        let t = if r == 0 { 1.0 } else { choose_t_star(nuclear_norm(&z) / r as f64, depth) };
        return Ok((t, z));
    }
    let (d, k) = (dataset.d(), dataset.k());
    let s1 = spectral_norm(&dataset.x.t().dot(&dataset.labels));
    let zero_value = 0.5 * frobenius_sq(&dataset.labels);
    let zero = |s1: f64| -> (f64, Array2<f64>) {
        let t = if s1 == 0.0 || beta >= s1 { 1.0 } else { (beta / s1).powf(1.0 / (depth as f64 - 2.0)) };
        (t, Array2::zeros((d, k)))
    };
    if s1 == 0.0 {
        return Ok(zero(s1));
    }
    let t_min = (beta / s1).powf(1.0 / (depth as f64 - 2.0));
    let z0 = pinv(&dataset.x, DEFAULT_RANK_TOL)?.dot(&dataset.labels);
    let t_hi = 2.0 * t_min.max(nuclear_norm(&z0).powf(1.0 / depth as f64));
    const GRID: usize = 80;
    let ratio = (t_hi / t_min).ln() / GRID as f64;
    let grid: Vec<f64> = (1..=GRID).map(|i| t_min * (ratio * i as f64).exp()).collect();
    let mut best = (f64::INFINITY, 0usize);
    for (i, &t) in grid.iter().enumerate() {
        let (j, _) = linear_radius_objective(dataset, beta, depth, t)?;
        if j < best.0 {
            best = (j, i);
        }
    }
    let lo = if best.1 == 0 { t_min } else { grid[best.1 - 1] };
    let hi = grid[(best.1 + 1).min(GRID - 1)];
    let t = refine_radius(dataset, beta, depth, lo, hi)?;
    let (j, z) = linear_radius_objective(dataset, beta, depth, t)?;
    let (jg, zg) = linear_radius_objective(dataset, beta, depth, grid[best.1])?;
    let (j, z, t) = if jg < j { (jg, zg, grid[best.1]) } else { (j, z, t) };
    if zero_value <= j {
        return Ok(zero(s1));
    }
    Ok((t, z))
}

/// Root of the stationarity residual when it changes sign on `[lo, hi]`,
/// otherwise a golden-section minimizer of the radius objective.
fn refine_radius(dataset: &Dataset, beta: f64, depth: usize, lo: f64, hi: f64) -> Result<f64> {
    let (flo, fhi) = (radius_residual(dataset, beta, depth, lo)?, radius_residual(dataset, beta, depth, hi)?);
    if flo < 0.0 && fhi > 0.0 {
        let (mut a, mut b) = (lo, hi);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if mid <= a || mid >= b {
                break;
            }
            if radius_residual(dataset, beta, depth, mid)? < 0.0 {
                a = mid;
            } else {
                b = mid;
            }
        }
        return Ok(0.5 * (a + b));
    }
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = linear_radius_objective(dataset, beta, depth, c)?.0;
    let mut fd = linear_radius_objective(dataset, beta, depth, d)?.0;
    for _ in 0..100 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = linear_radius_objective(dataset, beta, depth, c)?.0;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = linear_radius_objective(dataset, beta, depth, d)?.0;
        }
        if b - a <= 1e-15 * b {
            break;
        }
    }
    Ok(0.5 * (a + b))
}

/// Architecture for the whitened multiclass construction: one single-unit
/// branch per class with inner layers of the given width.
pub fn whitened_arch(dataset: &Dataset, depth: usize, width: usize) -> Result<Architecture> {
    let mut widths = vec![width.max(dataset.k()); depth.saturating_sub(1)];
    if let Some(last) = widths.last_mut() {
        *last = 1;
    }
    Architecture::new(depth, dataset.k(), dataset.d(), widths, Activation::Relu, dataset.k())
}

/// Optimal ReLU net for whitened features and one-hot labels at unit radius.
pub fn deep_relu_whitened(dataset: &Dataset, beta: f64, arch: &Architecture) -> Result<NetworkParams> {
    deep_relu_whitened_with(dataset, beta, arch, Radius::Unit, None)
}

/// Whitened multiclass construction with an explicit radius rule.
///
/// Branch `j` maps the inputs onto `y_j / ‖y_j‖` and scales it by the
/// soft-thresholded class norm. `Radius::Optimal` picks a separate radius per
/// class that minimizes the squared-norm objective.
pub fn deep_relu_whitened_with(
    dataset: &Dataset,
    beta: f64,
    arch: &Architecture,
    radius: Radius,
    chain: Option<&DirectionChain>,
) -> Result<NetworkParams> {
    check_beta(beta)?;
    check_arch_matches(arch, dataset)?;
    if !dataset.whitened {
        return Err(Error::PreconditionViolated("features are not whitened".into()));
    }
    if !dataset.is_one_hot() {
        return Err(Error::PreconditionViolated("labels are not one-hot".into()));
    }
    if arch.activation != Activation::Relu || arch.batch_norm || arch.last_hidden_bias {
        return Err(Error::PreconditionViolated("whitened construction needs a plain relu net".into()));
    }
    let k = dataset.k();
    let depth = arch.depth;
    if arch.branches < k {
        return Err(Error::WidthTooSmall { width: arch.branches, needed: k });
    }
    if let Some(&w) = arch.widths[..depth - 2].iter().find(|&&w| w < k) {
        return Err(Error::WidthTooSmall { width: w, needed: k });
    }
    let t_fixed = radius_value(radius)?;
    let default_chain;
    let chain = match chain {
        Some(c) => {
            check_chain(c, arch)?;
            if c.mode != ChainMode::NonnegOrthogonal {
                return Err(Error::PreconditionViolated("relu chains must be nonnegative".into()));
            }
            c
        }
        None => {
            default_chain = make_chain(arch, ChainMode::NonnegOrthogonal, &vec![1.0; arch.branches], 0)?;
            &default_chain
        }
    };
    let m = arch.last_width();
    let mut p = NetworkParams::zeros(arch);
    let mut norms = vec![t_fixed; arch.branches];
    for j in 0..k {
        let yj = dataset.labels.column(j);
        let g = norm(yj);
        let phi0 = dataset.x.t().dot(&yj);
        let pn = norm(phi0.view());
        if g == 0.0 || pn == 0.0 {
            continue;
        }
        let (t, last, s) = match radius {
            Radius::Optimal => {
                let s = power_shrink(g, 1.0, 0.5 * beta * depth as f64, depth);
                let t = if depth > 2 { s.powf(1.0 / depth as f64) } else { 1.0 };
                let last = if depth > 2 { t } else { s.sqrt() };
                (t, last, s)
            }
            _ => {
                let t = t_fixed;
                (t, 1.0, (g - beta * t.powi(2 - depth as i32)).max(0.0))
            }
        };
        norms[j] = t;
        if s == 0.0 {
            continue;
        }
        let inner = t.powi(depth as i32 - 2);
        let col = if j < m { j } else { 0 };
        let mut head = Array1::zeros(k);
        head[j] = s / (inner * last);
        let dirs = unit_dirs(chain, j);
        write_unit(
            &mut p,
            arch,
            Unit { branch: j, col, input: (&phi0 / pn).view(), dirs: &dirs, t, last, head, bias: None },
        );
    }
    if depth > 2 {
        p.branch_norms = Some(norms);
    }
    Ok(p)
}

/// Architecture holding every unit the rank-one construction needs: a single
/// branch for depth two, one single-unit branch per unit otherwise.
pub fn rank_one_arch(dataset: &Dataset, depth: usize, bias: bool, width: usize) -> Result<Architecture> {
    let (c, _) = dataset
        .rank_one
        .as_ref()
        .ok_or_else(|| Error::PreconditionViolated("dataset has no rank-one factorization".into()))?;
    let units = if bias {
        2 * c.len() + 1
    } else {
        usize::from(c.iter().any(|&v| v > 0.0)) + usize::from(c.iter().any(|&v| v < 0.0))
    }
    .max(1);
    let arch = if depth == 2 {
        Architecture::new(2, 1, dataset.d(), vec![units], Activation::Relu, dataset.k())?
    } else {
        let mut widths = vec![width.max(1); depth - 1];
        widths[depth - 2] = 1;
        Architecture::new(depth, units, dataset.d(), widths, Activation::Relu, dataset.k())?
    };
    Ok(if bias { arch.with_bias() } else { arch })
}

/// Optimal ReLU net for rank-one features `x = c a0ᵀ`.
///
/// The radius defaults to the optimal one for β = 0 and to unit radius for β > 0.
pub fn deep_relu_rank_one(dataset: &Dataset, arch: &Architecture, beta: f64) -> Result<NetworkParams> {
    let radius = if beta == 0.0 { Radius::Optimal } else { Radius::Unit };
    deep_relu_rank_one_with(dataset, arch, beta, radius)
}

/// Rank-one construction with an explicit radius rule.
///
/// Without bias every unit is `(±c)₊` scaled, so labels must lie in the span of
/// `c₊` and `c₋` when β = 0. With a last-hidden bias (β = 0 only) there is a
/// hinge at every data point in both directions plus one constant unit, and
/// the head is the minimum-norm interpolating combination.
pub fn deep_relu_rank_one_with(
    dataset: &Dataset,
    arch: &Architecture,
    beta: f64,
    radius: Radius,
) -> Result<NetworkParams> {
    check_beta(beta)?;
    check_arch_matches(arch, dataset)?;
    dataset.validate()?;
    let (c, a0) = dataset
        .rank_one
        .as_ref()
        .ok_or_else(|| Error::PreconditionViolated("dataset has no rank-one factorization".into()))?;
    if arch.activation != Activation::Relu || arch.batch_norm {
        return Err(Error::PreconditionViolated("rank-one construction needs a relu net without batch norm".into()));
    }
    let depth = arch.depth;
    if depth >= 3 && c.iter().any(|&v| v < 0.0) {
        return Err(Error::PreconditionViolated("depth >= 3 needs a nonnegative data factor c".into()));
    }
    let a0n = norm(a0.view());
    if a0n == 0.0 {
        return Err(Error::PreconditionViolated("zero input direction a0".into()));
    }
    let t_fixed = radius_value(radius)?;
    let slots = if depth == 2 { arch.branches * arch.last_width() } else { arch.branches };
    let place = |u: usize| if depth == 2 { (u / arch.last_width(), u % arch.last_width()) } else { (u, 0) };
    let chain = make_chain(
        &Architecture { branches: 1, ..arch.clone() },
        ChainMode::NonnegOrthogonal,
        &[1.0],
        0,
    )?;
    let dirs = unit_dirs(&chain, 0);
    let unit_input = a0 / a0n;
    let neg_input = -&unit_input;
    let mut p = NetworkParams::zeros(arch);
    let mut norms = vec![t_fixed; arch.branches];

    if arch.last_hidden_bias {
        if beta > 0.0 {
            return Err(Error::PreconditionViolated("the bias construction covers the minimum-norm problem only".into()));
        }
        let n = c.len();
        let mut sorted = c.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateAbscissa(w[0]));
        }
        let units = 2 * n + 1;
        if slots < units {
            return Err(Error::WidthTooSmall { width: slots, needed: units });
        }
        // Features at unit radius; the last column is the constant unit.
        let mut phi = Array2::zeros((n, units));
        for i in 0..n {
            for (si, s) in [1.0, -1.0].into_iter().enumerate() {
                let col = 2 * i + si;
                for r in 0..n {
                    phi[[r, col]] = a0n * (s * (c[r] - c[i])).max(0.0);
                }
            }
        }
        phi.column_mut(units - 1).fill(1.0);
        let head = pinv(&phi, DEFAULT_RANK_TOL)?.dot(&dataset.labels);
        let res = relative_residual(&phi.dot(&head), &dataset.labels);
        if res > FEASIBILITY_TOL {
            return Err(Error::Infeasible(format!("hinge features do not interpolate (relative residual {res:.3e})")));
        }
        let hmax = head.rows().into_iter().map(norm).fold(0.0, f64::max);
        for u in 0..units {
            let h = head.row(u).to_owned();
            let hn = norm(h.view());
            if hn <= 1e-14 * hmax || hn == 0.0 {
                continue;
            }
            let (j, col) = place(u);
            if u == units - 1 {
                write_unit(
                    &mut p,
                    arch,
                    Unit { branch: j, col, input: unit_input.view(), dirs: &dirs, t: 1.0, last: 0.0, head: h, bias: Some(1.0) },
                );
                if depth > 2 {
                    norms[j] = 1.0;
                }
                continue;
            }
            let (i, s) = (u / 2, if u % 2 == 0 { 1.0 } else { -1.0 });
            let (t, last) = match radius {
                Radius::Optimal if depth > 2 => {
                    let t = choose_t_star(hn, depth);
                    (t, t)
                }
                Radius::Optimal => (1.0, hn.sqrt()),
                _ => (t_fixed, 1.0),
            };
            let inner = t.powi(depth as i32 - 2);
            let input = if s > 0.0 || depth > 2 { unit_input.view() } else { neg_input.view() };
            // Depth >= 3 reaches the last layer with a positive multiple of c,
            // so the sign of a hinge is carried by the last-layer column.
            let last_signed = if depth > 2 { last * s } else { last };
            let bias = -last * s * a0n * inner * c[i];
            write_unit(
                &mut p,
                arch,
                Unit { branch: j, col, input, dirs: &dirs, t, last: last_signed, head: &h / (inner * last), bias: Some(bias) },
            );
            if depth > 2 {
                norms[j] = t;
            }
        }
    } else {
        let cp = c.mapv(|v| v.max(0.0));
        let cm = c.mapv(|v| (-v).max(0.0));
        let feats: Vec<(f64, Array1<f64>)> = [(1.0, cp), (-1.0, cm)].into_iter().filter(|(_, f)| f.iter().any(|&v| v > 0.0)).collect();
        if slots < feats.len() {
            return Err(Error::WidthTooSmall { width: slots, needed: feats.len() });
        }
        let y = &dataset.labels;
        let mut fitted = Array2::<f64>::zeros(y.dim());
        let mut coefs = Vec::new();
        for (s, f) in &feats {
            let ff = f.dot(f);
            let ytf = y.t().dot(f);
            let g = ytf.mapv(|v| v / ff);
            let gn = norm(g.view());
            let b = match radius {
                Radius::Optimal if beta > 0.0 => {
                    let w = 0.5 * beta * depth as f64 * a0n.powf(-2.0 / depth as f64);
                    let m = power_shrink(gn, ff, w, depth);
                    if gn > 0.0 {
                        &g * (m / gn)
                    } else {
                        g.clone()
                    }
                }
                _ => {
                    let r = a0n * t_fixed.powi(depth as i32 - 2);
                    let tau = beta / r;
                    let yn = norm(ytf.view());
                    if yn == 0.0 {
                        g.clone()
                    } else {
                        &g * (1.0 - tau / yn).max(0.0)
                    }
                }
            };
            fitted += &crate::linalg::outer(f.view(), b.view());
            coefs.push((*s, b));
        }
        if beta == 0.0 {
            let res = relative_residual(&fitted, y);
            if res > FEASIBILITY_TOL {
                return Err(Error::Infeasible(format!(
                    "labels are not in the span of the rectified data factor (relative residual {res:.3e})"
                )));
            }
        }
        for (u, (s, b)) in coefs.into_iter().enumerate() {
            let bn = norm(b.view());
            if bn == 0.0 {
                continue;
            }
            let (t, last) = match radius {
                Radius::Optimal => {
                    let pp = bn / a0n;
                    if depth > 2 {
                        let t = choose_t_star(pp, depth);
                        (t, t)
                    } else {
                        (1.0, pp.sqrt())
                    }
                }
                _ => (t_fixed, 1.0),
            };
            let inner = t.powi(depth as i32 - 2);
            let (j, col) = place(u);
            let input = if s > 0.0 { unit_input.view() } else { neg_input.view() };
            let head = &b / (a0n * inner * last);
            write_unit(&mut p, arch, Unit { branch: j, col, input, dirs: &dirs, t, last, head, bias: None });
            if depth > 2 {
                norms[j] = t;
            }
        }
    }
    if depth > 2 {
        p.branch_norms = Some(norms);
    }
    Ok(p)
}

/// Architecture of [`bn_head`]: one batch-normalized unit per class reading
/// `features` columns.
pub fn bn_head_arch(features: usize, k: usize) -> Architecture {
    Architecture {
        depth: 2,
        branches: k,
        input_dim: features,
        widths: vec![1],
        activation: Activation::Relu,
        last_hidden_bias: false,
        batch_norm: true,
        outputs: k,
    }
}

/// Optimal batch-normalized head on top of fixed per-class features.
///
/// `activations` holds the features feeding each branch (a single matrix is
/// shared by all branches). Returns the params together with their
/// architecture, see [`bn_head_arch`].
pub fn bn_head(activations: &[Array2<f64>], dataset: &Dataset, beta: f64) -> Result<(NetworkParams, Architecture)> {
    check_beta(beta)?;
    if !dataset.is_one_hot() {
        return Err(Error::PreconditionViolated("labels are not one-hot".into()));
    }
    let k = dataset.k();
    let n = dataset.n();
    if activations.is_empty() || (activations.len() != 1 && activations.len() != k) {
        return Err(Error::ShapeError(format!("expected 1 or {k} feature matrices, got {}", activations.len())));
    }
    let feats = |j: usize| if activations.len() == 1 { &activations[0] } else { &activations[j] };
    let width = activations[0].ncols();
    if activations.iter().any(|a| a.nrows() != n || a.ncols() != width) {
        return Err(Error::ShapeError("feature matrices must all be n x p".into()));
    }
    let arch = bn_head_arch(width, k);
    let mut p = NetworkParams::zeros(&arch);
    let rn = (n as f64).sqrt();
    for j in 0..k {
        let a = feats(j);
        let y = dataset.labels.column(j);
        let yn = norm(y);
        if yn == 0.0 {
            return Err(Error::PreconditionViolated(format!("class {j} is empty")));
        }
        let w = pinv(a, DEFAULT_RANK_TOL)?.dot(&y);
        let residual = norm((a.dot(&w) - y).view()) / yn;
        if residual > FEASIBILITY_TOL {
            return Err(Error::OverparamAssumptionViolated { column: j, residual });
        }
        let mean = y.sum() / n as f64;
        let centered = y.mapv(|v| v - mean);
        p.weights[j][0].column_mut(0).assign(&w);
        p.bn_scale.as_mut().expect("bn")[j][0] = norm(centered.view()) / yn;
        p.bn_shift.as_mut().expect("bn")[j][0] = y.sum() / (rn * yn);
        p.head[j][[0, j]] = (yn - beta).max(0.0);
    }
    Ok((p, arch))
}
