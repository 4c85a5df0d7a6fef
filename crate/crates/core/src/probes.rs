//! Structural measurements on trained or constructed networks: ranks, norm
//! ratios, layer alignment, kinks of 1-D nets and neural-collapse distance.

use ndarray::{concatenate, s, Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::forward::{forward, predict};
use crate::linalg::{frobenius, norm, orthonormal_columns, singular_values, spectral_norm, svd, DEFAULT_RANK_TOL};
use crate::types::{Architecture, Dataset, NetworkParams};

/// Grid size used by [`detect_kinks`] callers that have no preference.
pub const KINK_GRID: usize = 10_001;
pub const KINK_TOL: f64 = 1e-4;

/// Number of singular values above `tol · σ_max`.
pub fn numerical_rank(m: &Array2<f64>, tol: f64) -> Result<usize> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("rank tolerance must be positive, got {tol}")));
    }
    Ok(rank_of(&singular_values(m)?.to_vec(), tol))
}

fn rank_of(sigma: &[f64], tol: f64) -> usize {
    let smax = sigma.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return 0;
    }
    sigma.iter().filter(|&&s| s > tol * smax).count()
}

/// `(‖M‖₂, ‖M‖_F, ‖M‖₂ / ‖M‖_F)`.
pub fn spectral_vs_frobenius(m: &Array2<f64>) -> Result<(f64, f64, f64)> {
    let f = frobenius(m);
    if f == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let s = spectral_norm(m);
    Ok((s, f, s / f))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kink {
    pub x: f64,
    /// Magnitude of the slope change (Euclidean over outputs).
    pub slope_change: f64,
}

fn check_scalar_input(arch: &Architecture) -> Result<()> {
    if arch.input_dim != 1 {
        return Err(Error::PreconditionViolated(format!("kinks need 1-D input, got {}", arch.input_dim)));
    }
    if arch.batch_norm {
        return Err(Error::PreconditionViolated("batch norm output depends on the whole batch".into()));
    }
    Ok(())
}

/// Kinks of a 1-D network with their slope changes.
///
/// `f` is sampled at `grid` points spanning `range` padded by 10% on each
/// side. Runs of grid points whose second difference exceeds
/// `tol · h · (1 + max slope)` are merged into one kink, placed at the
/// centroid of the second differences of the run and its two neighbours.
/// For an isolated break this centroid is the exact break location.
pub fn detect_kinks_weighted(
    params: &NetworkParams,
    arch: &Architecture,
    range: (f64, f64),
    grid: usize,
    tol: f64,
) -> Result<Vec<Kink>> {
    check_scalar_input(arch)?;
    if grid < 3 {
        return Err(Error::InvalidInput("kink grid needs at least 3 points".into()));
    }
    let (lo, hi) = (range.0.min(range.1), range.0.max(range.1));
    let pad = 0.1 * (hi - lo).max(f64::EPSILON.max(1e-3 * hi.abs().max(lo.abs())));
    let (a, b) = (lo - pad, hi + pad);
    let h = (b - a) / (grid - 1) as f64;
    let xs = Array1::from_shape_fn(grid, |i| a + h * i as f64);
    let out = predict(params, arch, &xs.clone().insert_axis(Axis(1)))?;
    let slope = (0..grid - 1).map(|i| norm((&out.row(i + 1) - &out.row(i)).view()) / h).fold(0.0, f64::max);
    let mut second = vec![Array1::zeros(arch.outputs); grid];
    for i in 1..grid - 1 {
        second[i] = &out.row(i + 1) - &(&out.row(i) * 2.0) + out.row(i - 1);
    }
    let mag: Vec<f64> = second.iter().map(|v| norm(v.view())).collect();
    let thresh = tol * h * (1.0 + slope);
    let mut kinks = Vec::new();
    let mut i = 1;
    while i < grid - 1 {
        if mag[i] <= thresh {
            i += 1;
            continue;
        }
        let start = i;
        while i < grid - 1 && mag[i] > thresh {
            i += 1;
        }
        let lo_i = start.saturating_sub(1).max(1);
        let hi_i = i.min(grid - 2);
        let (mut w, mut wx) = (0.0, 0.0);
        let mut total = Array1::<f64>::zeros(arch.outputs);
        for k in lo_i..=hi_i {
            w += mag[k];
            wx += mag[k] * xs[k];
            total += &second[k];
        }
        kinks.push(Kink { x: wx / w, slope_change: norm(total.view()) / h });
    }
    Ok(kinks)
}

/// Kink abscissae of a 1-D network, see [`detect_kinks_weighted`].
pub fn detect_kinks(
    params: &NetworkParams,
    arch: &Architecture,
    range: (f64, f64),
    grid: usize,
    tol: f64,
) -> Result<Vec<f64>> {
    Ok(detect_kinks_weighted(params, arch, range, grid, tol)?.into_iter().map(|k| k.x).collect())
}

/// Simplex equiangular tight frame `columns = α U S` with
/// `S = √(K/(K−1)) (I_K − (1/K) 1 1ᵀ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EtfSpec {
    pub k: usize,
    pub scale_alpha: f64,
    /// p x K with orthonormal columns.
    pub rotation: Array2<f64>,
    /// p x K.
    pub columns: Array2<f64>,
}

impl EtfSpec {
    /// ETF with the first `K` coordinate axes as rotation.
    pub fn standard(p: usize, k: usize, alpha: f64) -> Result<Self> {
        if k < 2 || p < k {
            return Err(Error::InvalidInput(format!("simplex ETF needs 2 <= K <= p, got K={k}, p={p}")));
        }
        let mut rotation = Array2::zeros((p, k));
        rotation.slice_mut(s![..k, ..]).assign(&Array2::eye(k));
        let kf = k as f64;
        let simplex = (Array2::eye(k) - Array2::from_elem((k, k), 1.0 / kf)) * (kf / (kf - 1.0)).sqrt();
        let columns = rotation.dot(&simplex) * alpha;
        Ok(EtfSpec { k, scale_alpha: alpha, rotation, columns })
    }
}

fn class_sizes(class_index: &[usize]) -> Vec<usize> {
    let k = class_index.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0; k];
    for &c in class_index {
        sizes[c] += 1;
    }
    sizes
}

/// Distance of the globally centered class means of `a_last` (n x p) to the
/// simplex ETF with `α = √((K−1)/n)`, plus the ETF at the best-fit `α`.
pub fn neural_collapse_check(a_last: &Array2<f64>, class_index: &[usize]) -> Result<(f64, EtfSpec)> {
    let n = a_last.nrows();
    if class_index.len() != n {
        return Err(Error::ShapeError(format!("{} labels for {n} rows", class_index.len())));
    }
    let sizes = class_sizes(class_index);
    if sizes.is_empty() || sizes.iter().any(|&s| s != sizes[0]) {
        return Err(Error::UnbalancedClasses(sizes));
    }
    let k = sizes.len();
    let p = a_last.ncols();
    let mean = a_last.mean_axis(Axis(0)).expect("nonempty");
    let centered = a_last - &mean.insert_axis(Axis(0));
    let mut means = Array2::<f64>::zeros((p, k));
    for (row, &c) in centered.rows().into_iter().zip(class_index) {
        let mut col = means.column_mut(c);
        col += &row;
    }
    means /= sizes[0] as f64;
    let alpha = ((k as f64 - 1.0) / n as f64).sqrt();
    let target = EtfSpec::standard(p, k, alpha)?;
    let distance = frobenius(&(&means - &target.columns));
    let unit = EtfSpec::standard(p, k, 1.0)?;
    let fitted = (&means * &unit.columns).sum() / (&unit.columns * &unit.columns).sum();
    Ok((distance, EtfSpec::standard(p, k, fitted)?))
}

/// Mean over nonzero columns of `w1` of the squared norm of the normalized
/// column's projection onto `span(directions)`.
pub fn singular_projection(w1: &Array2<f64>, directions: &Array2<f64>) -> Result<f64> {
    if w1.nrows() != directions.nrows() {
        return Err(Error::ShapeError(format!("{} vs {} rows", w1.nrows(), directions.nrows())));
    }
    let q = orthonormal_columns(directions, DEFAULT_RANK_TOL)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for col in w1.columns() {
        let c = norm(col);
        if c == 0.0 {
            continue;
        }
        let proj = q.t().dot(&col) / c;
        total += proj.dot(&proj);
        count += 1;
    }
    if count == 0 {
        return Err(Error::ZeroMatrix);
    }
    Ok(total / count as f64)
}

/// `|cos|` between the dominant output direction of each layer and the
/// dominant input direction of the next, for every branch, head included.
pub fn branch_alignment(params: &NetworkParams, arch: &Architecture) -> Result<Vec<f64>> {
    if arch.depth < 3 {
        return Err(Error::PreconditionViolated("alignment needs depth >= 3".into()));
    }
    params.check(arch)?;
    let mut out = Vec::new();
    for j in 0..arch.branches {
        let mut mats: Vec<&Array2<f64>> = params.weights[j].iter().collect();
        mats.push(&params.head[j]);
        let mut factors = Vec::with_capacity(mats.len());
        for (l, m) in mats.iter().enumerate() {
            if frobenius(m) == 0.0 {
                return Err(Error::DegenerateBranch { branch: j, layer: l + 1 });
            }
            let f = svd(m)?;
            factors.push((f.u.column(0).to_owned(), f.v.column(0).to_owned()));
        }
        for l in 1..factors.len() {
            out.push(factors[l - 1].1.dot(&factors[l].0).abs().min(1.0));
        }
    }
    Ok(out)
}

/// Layer matrices with branches combined: the first layer side by side
/// (shared input), inner layers block diagonal, the head stacked.
pub fn combined_layers(params: &NetworkParams, arch: &Architecture) -> Vec<Array2<f64>> {
    let mut layers = Vec::with_capacity(arch.depth);
    for l in 0..arch.hidden_layers() {
        let blocks: Vec<_> = params.weights.iter().map(|w| w[l].view()).collect();
        if l == 0 {
            layers.push(concatenate(Axis(1), &blocks).expect("shared fan-in"));
        } else {
            let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
            let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
            let mut m = Array2::zeros((rows, cols));
            let (mut r, mut c) = (0, 0);
            for b in blocks {
                m.slice_mut(s![r..r + b.nrows(), c..c + b.ncols()]).assign(&b);
                r += b.nrows();
                c += b.ncols();
            }
            layers.push(m);
        }
    }
    let heads: Vec<_> = params.head.iter().map(|h| h.view()).collect();
    layers.push(concatenate(Axis(0), &heads).expect("shared outputs"));
    layers
}

/// Singular values of each [`combined_layers`] matrix. Block-diagonal layers
/// are decomposed block by block.
pub fn combined_spectra(params: &NetworkParams, arch: &Architecture) -> Result<Vec<Vec<f64>>> {
    let combined = combined_layers_sparse(params, arch);
    let mut out = Vec::with_capacity(combined.len());
    for layer in combined {
        let mut sigma = Vec::new();
        for block in layer {
            sigma.extend(singular_values(&block)?);
        }
        sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
        out.push(sigma);
    }
    Ok(out)
}

// Inner layers stay as their diagonal blocks.
fn combined_layers_sparse(params: &NetworkParams, arch: &Architecture) -> Vec<Vec<Array2<f64>>> {
    let mut layers = Vec::with_capacity(arch.depth);
    for l in 0..arch.hidden_layers() {
        if l == 0 {
            let blocks: Vec<_> = params.weights.iter().map(|w| w[0].view()).collect();
            layers.push(vec![concatenate(Axis(1), &blocks).expect("shared fan-in")]);
        } else {
            layers.push(params.weights.iter().map(|w| w[l].clone()).collect());
        }
    }
    let heads: Vec<_> = params.head.iter().map(|h| h.view()).collect();
    layers.push(vec![concatenate(Axis(0), &heads).expect("shared outputs")]);
    layers
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StructureReport {
    /// Per layer (head last), see [`combined_layers`].
    pub ranks: Vec<usize>,
    /// Per layer; 0 for an all-zero layer.
    pub spectral_over_frobenius: Vec<f64>,
    pub singular_values: Vec<Vec<f64>>,
    /// `[branch][hidden layer]` spectral/Frobenius ratio, 0 for a zero layer.
    pub branch_ratios: Vec<Vec<f64>>,
    /// Empty for depth 2 or when a layer is zero.
    pub alignment: Vec<f64>,
    /// Only for 1-D inputs.
    pub kinks: Vec<f64>,
    /// Only for batch-normalized nets on balanced one-hot data.
    pub etf_distance: Option<f64>,
    pub etf_alpha: Option<f64>,
}

impl StructureReport {
    /// Collects every probe that applies to this architecture and data.
    pub fn measure(params: &NetworkParams, arch: &Architecture, dataset: Option<&Dataset>) -> Result<Self> {
        params.check(arch)?;
        let mut rep = StructureReport::default();
        for sigma in combined_spectra(params, arch)? {
            let fro = sigma.iter().map(|x| x * x).sum::<f64>().sqrt();
            rep.ranks.push(rank_of(&sigma, DEFAULT_RANK_TOL));
            rep.spectral_over_frobenius.push(if fro > 0.0 { sigma[0] / fro } else { 0.0 });
            rep.singular_values.push(sigma);
        }
        for layers in &params.weights {
            let mut ratios = Vec::with_capacity(layers.len());
            for w in layers {
                let sigma = singular_values(w)?;
                let fro = sigma.dot(&sigma).sqrt();
                ratios.push(if fro > 0.0 { sigma[0] / fro } else { 0.0 });
            }
            rep.branch_ratios.push(ratios);
        }
        if arch.depth >= 3 {
            rep.alignment = branch_alignment(params, arch).unwrap_or_default();
        }
        let Some(ds) = dataset else { return Ok(rep) };
        if arch.input_dim == 1 && !arch.batch_norm {
            let col = ds.x.column(0);
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            rep.kinks = detect_kinks(params, arch, (lo, hi), KINK_GRID, KINK_TOL)?;
        }
        if arch.batch_norm {
            if let Some(idx) = ds.class_index() {
                let trace = forward(params, arch, &ds.x)?;
                let acts: Vec<_> = trace.last_hidden().into_iter().map(|a| a.view()).collect();
                let a = concatenate(Axis(1), &acts).expect("same rows");
                if let Ok((d, etf)) = neural_collapse_check(&a, &idx) {
                    rep.etf_distance = Some(d);
                    rep.etf_alpha = Some(etf.scale_alpha);
                }
            }
        }
        Ok(rep)
    }
}
