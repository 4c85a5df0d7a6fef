//! Output-preserving rescalings between the squared-norm and path-norm forms.
//!
//! Positive per-unit rescalings leave linear and ReLU outputs untouched, so the
//! weights of a unit can be traded against its head row. Balancing picks the
//! scaling that minimizes the squared-norm penalty for the same function.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::forward::{path_penalty, predict, squared_loss, weight_penalty};
use crate::linalg::{frobenius, frobenius_sq, max_abs, norm};
use crate::types::{Architecture, Dataset, NetworkParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceReport {
    /// ½ × squared norms of every penalised factor before balancing.
    pub objective_before: f64,
    /// Path form after balancing: Σ unit scale × head norm plus
    /// ½ Σ ‖inner layer‖² (which is ½ (L − 2) Σ t_j² once balanced).
    pub objective_after: f64,
    pub max_output_deviation: f64,
    pub output_scale: f64,
}

impl BalanceReport {
    pub fn output_preserved(&self) -> bool {
        self.max_output_deviation <= 1e-9 * (1.0 + self.output_scale)
    }
}

/// Both objective forms around a balancing step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalenceReport {
    pub balance: BalanceReport,
    pub loss_before: f64,
    pub loss_after: f64,
    /// ½ Σ squared norms at the balanced point.
    pub l2_penalty: f64,
    /// Rescaled penalty at the balanced point.
    pub rescaled_penalty: f64,
    /// Loss + β × ½ Σ squared norms at the input params.
    pub l2_objective_before: f64,
    /// Loss + β × rescaled penalty at the balanced point.
    pub rescaled_objective: f64,
}

impl EquivalenceReport {
    /// Loss terms agree and the two penalty forms coincide at the balanced point.
    pub fn consistent(&self, tol: f64) -> bool {
        let scale = 1.0 + self.l2_penalty.abs();
        (self.loss_before - self.loss_after).abs() <= tol * (1.0 + self.loss_before.abs())
            && (self.l2_penalty - self.rescaled_penalty).abs() <= tol * scale
    }
}

fn half_sq(params: &NetworkParams, arch: &Architecture) -> f64 {
    0.5 * weight_penalty(params, arch)
}

fn deviation(
    before: &NetworkParams,
    after: &NetworkParams,
    arch: &Architecture,
    probe: &Array2<f64>,
) -> Result<(f64, f64)> {
    let a = predict(before, arch, probe)?;
    let b = predict(after, arch, probe)?;
    Ok((max_abs(&(&a - &b)), max_abs(&a)))
}

/// Magnitude of unit `k` of branch `j` on the last hidden layer.
fn unit_scale(params: &NetworkParams, arch: &Architecture, j: usize, k: usize) -> f64 {
    if arch.batch_norm {
        let g = params.bn_scale.as_ref().expect("bn")[j][k];
        let a = params.bn_shift.as_ref().expect("bn")[j][k];
        g.hypot(a)
    } else {
        norm(params.weights[j].last().expect("hidden").column(k))
    }
}

/// Multiplies the incoming side of unit `(j, k)` by `a > 0` and divides its head row by `a`.
fn scale_unit(params: &mut NetworkParams, arch: &Architecture, j: usize, k: usize, a: f64) {
    if arch.batch_norm {
        params.bn_scale.as_mut().expect("bn")[j][k] *= a;
        params.bn_shift.as_mut().expect("bn")[j][k] *= a;
    } else {
        params.weights[j].last_mut().expect("hidden").column_mut(k).mapv_inplace(|v| v * a);
        if let Some(b) = params.biases.as_mut() {
            b[j][k] *= a;
        }
    }
    params.head[j].row_mut(k).mapv_inplace(|v| v / a);
}

/// A unit with zero incoming weights but a nonzero bias emits a constant;
/// it cannot be balanced against its head and is left alone.
fn is_free_constant(params: &NetworkParams, arch: &Architecture, j: usize, k: usize) -> bool {
    !arch.batch_norm && params.biases.as_ref().is_some_and(|b| b[j][k] != 0.0)
}

fn check_units(params: &NetworkParams, arch: &Architecture, j: usize) -> Result<Vec<Option<(f64, f64)>>> {
    (0..arch.last_width())
        .map(|k| {
            let h = norm(params.head[j].row(k));
            if h == 0.0 {
                return Ok(None);
            }
            let s = unit_scale(params, arch, j, k);
            if s == 0.0 {
                if is_free_constant(params, arch, j, k) {
                    return Ok(None);
                }
                return Err(Error::DegenerateNeuron { branch: j, neuron: k });
            }
            Ok(Some((s, h)))
        })
        .collect()
}

/// Rescales each hidden unit of a two-layer net so its incoming weights and
/// head row carry equal norm `sqrt(‖w‖ ‖h‖)`.
///
/// `probe` is only used to measure the output deviation in the report.
pub fn balance_two_layer(
    params: &NetworkParams,
    arch: &Architecture,
    probe: &Array2<f64>,
) -> Result<(NetworkParams, BalanceReport)> {
    params.check(arch)?;
    if arch.depth != 2 {
        return Err(Error::PreconditionViolated(format!("two-layer balancing needs depth 2, got {}", arch.depth)));
    }
    let mut out = params.clone();
    for j in 0..arch.branches {
        for (k, unit) in check_units(params, arch, j)?.into_iter().enumerate() {
            if let Some((s, h)) = unit {
                scale_unit(&mut out, arch, j, k, (h / s).sqrt());
            }
        }
    }
    let (dev, scale) = deviation(params, &out, arch, probe)?;
    let report = BalanceReport {
        objective_before: half_sq(params, arch),
        objective_after: path_penalty(&out, arch),
        max_output_deviation: dev,
        output_scale: scale,
    };
    Ok((out, report))
}

fn inner_half_sq(params: &NetworkParams, arch: &Architecture) -> f64 {
    if arch.batch_norm {
        return 0.0;
    }
    params
        .weights
        .iter()
        .map(|w| w.iter().take(arch.depth - 2).map(frobenius_sq).sum::<f64>())
        .sum::<f64>()
        * 0.5
}

/// Sets every inner layer (1 .. L−2) of a branch to the geometric mean of
/// their Frobenius norms, normalises each last-hidden unit to unit scale and
/// moves the magnitude into the head.
pub fn balance_deep(
    params: &NetworkParams,
    arch: &Architecture,
    probe: &Array2<f64>,
) -> Result<(NetworkParams, BalanceReport)> {
    params.check(arch)?;
    if arch.depth < 3 {
        return Err(Error::PreconditionViolated(format!("deep balancing needs depth >= 3, got {}", arch.depth)));
    }
    let inner = arch.depth - 2;
    let mut out = params.clone();
    let mut t = vec![0.0; arch.branches];
    for j in 0..arch.branches {
        let norms: Vec<f64> = params.weights[j][..inner].iter().map(frobenius).collect();
        t[j] = norms.iter().cloned().fold(0.0, f64::max);
        if params.head[j].iter().all(|&v| v == 0.0) {
            continue;
        }
        if let Some(l) = norms.iter().position(|&v| v == 0.0) {
            return Err(Error::DegenerateBranch { branch: j, layer: l + 1 });
        }
        let g = (norms.iter().map(|v| v.ln()).sum::<f64>() / inner as f64).exp();
        // Fix the rounding of the product of scales on the last inner layer.
        let mut prod = 1.0;
        for l in 0..inner {
            let s = if l + 1 < inner { g / norms[l] } else { 1.0 / prod };
            prod *= s;
            out.weights[j][l].mapv_inplace(|v| v * s);
        }
        t[j] = g;
        for (k, unit) in check_units(&out, arch, j)?.into_iter().enumerate() {
            if let Some((s, _)) = unit {
                if arch.batch_norm {
                    let w = out.weights[j].last_mut().expect("hidden");
                    let c = norm(w.column(k));
                    if c > 0.0 {
                        w.column_mut(k).mapv_inplace(|v| v / c);
                    }
                }
                scale_unit(&mut out, arch, j, k, 1.0 / s);
            }
        }
    }
    if !arch.batch_norm {
        out.branch_norms = Some(t);
    }
    let (dev, scale) = deviation(params, &out, arch, probe)?;
    let report = BalanceReport {
        objective_before: half_sq(params, arch),
        objective_after: path_penalty(&out, arch) + inner_half_sq(&out, arch),
        max_output_deviation: dev,
        output_scale: scale,
    };
    Ok((out, report))
}

/// Per-branch factor norms that the squared penalty sees, in layer order.
fn branch_factors(params: &NetworkParams, arch: &Architecture, j: usize) -> Vec<f64> {
    let mut f = Vec::new();
    if arch.batch_norm {
        f.push(unit_scale(params, arch, j, 0));
    } else {
        f.extend(params.weights[j].iter().map(frobenius));
    }
    f.push(frobenius(&params.head[j]));
    f
}

/// Gives every penalised factor of a branch the same norm `P^(1/F)`, where
/// `P` is the product of the `F` factor norms. This is the minimizer of the
/// squared penalty over output-preserving rescalings when each branch ends in
/// a single unit.
pub fn balance_uniform(
    params: &NetworkParams,
    arch: &Architecture,
    probe: &Array2<f64>,
) -> Result<(NetworkParams, BalanceReport)> {
    params.check(arch)?;
    if arch.last_width() != 1 {
        return Err(Error::PreconditionViolated("uniform balancing needs a single last hidden unit per branch".into()));
    }
    let mut out = params.clone();
    let mut t = vec![0.0; arch.branches];
    for j in 0..arch.branches {
        let f = branch_factors(params, arch, j);
        if f.last() == Some(&0.0) {
            t[j] = if arch.depth > 2 { f[0] } else { 0.0 };
            continue;
        }
        if let Some(l) = f.iter().position(|&v| v == 0.0) {
            if !arch.batch_norm && l + 1 == arch.depth - 1 && is_free_constant(params, arch, j, 0) {
                continue;
            }
            return Err(Error::DegenerateBranch { branch: j, layer: l + 1 });
        }
        let g = (f.iter().map(|v| v.ln()).sum::<f64>() / f.len() as f64).exp();
        let mut prod = 1.0;
        let n = f.len();
        for (i, fi) in f.iter().enumerate() {
            let s = if i + 1 < n { g / fi } else { 1.0 / prod };
            prod *= s;
            if i + 1 == n {
                out.head[j].mapv_inplace(|v| v * s);
            } else if arch.batch_norm {
                out.bn_scale.as_mut().expect("bn")[j][0] *= s;
                out.bn_shift.as_mut().expect("bn")[j][0] *= s;
            } else {
                out.weights[j][i].mapv_inplace(|v| v * s);
                if i + 2 == n {
                    if let Some(b) = out.biases.as_mut() {
                        b[j][0] *= prod;
                    }
                }
            }
        }
        t[j] = g;
    }
    if !arch.batch_norm && arch.depth > 2 {
        out.branch_norms = Some(t);
    }
    let (dev, scale) = deviation(params, &out, arch, probe)?;
    let report = BalanceReport {
        objective_before: half_sq(params, arch),
        objective_after: uniform_penalty(&out, arch),
        max_output_deviation: dev,
        output_scale: scale,
    };
    Ok((out, report))
}

/// Σ_j (F/2) P_j^(2/F): the squared penalty of a uniformly balanced net.
fn uniform_penalty(params: &NetworkParams, arch: &Architecture) -> f64 {
    (0..arch.branches)
        .map(|j| {
            let f = branch_factors(params, arch, j);
            let nf = f.len() as f64;
            let p: f64 = f.iter().product();
            0.5 * nf * p.powf(2.0 / nf)
        })
        .sum()
}

/// Balances the params and evaluates both objective forms.
///
/// Depth two uses per-unit balancing and the path penalty; deeper nets with a
/// single last hidden unit per branch use uniform balancing; otherwise the
/// inner-layer balancing of [`balance_deep`] is used, whose penalty forms only
/// agree after the inner radius is optimised.
pub fn verify_equivalence(
    params: &NetworkParams,
    arch: &Architecture,
    beta: f64,
    dataset: &Dataset,
) -> Result<EquivalenceReport> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidInput(format!("beta must be >= 0, got {beta}")));
    }
    let (balanced, report, rescaled) = if arch.depth == 2 {
        let (b, r) = balance_two_layer(params, arch, &dataset.x)?;
        let p = path_penalty(&b, arch);
        (b, r, p)
    } else if arch.last_width() == 1 {
        let (b, r) = balance_uniform(params, arch, &dataset.x)?;
        let p = uniform_penalty(&b, arch);
        (b, r, p)
    } else {
        let (b, r) = balance_deep(params, arch, &dataset.x)?;
        let p = path_penalty(&b, arch) + inner_half_sq(&b, arch);
        (b, r, p)
    };
    let loss_before = squared_loss(&predict(params, arch, &dataset.x)?, &dataset.labels);
    let loss_after = squared_loss(&predict(&balanced, arch, &dataset.x)?, &dataset.labels);
    Ok(EquivalenceReport {
        balance: report,
        loss_before,
        loss_after,
        l2_penalty: half_sq(&balanced, arch),
        rescaled_penalty: rescaled,
        l2_objective_before: loss_before + beta * half_sq(params, arch),
        rescaled_objective: loss_after + beta * rescaled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Activation;
    use ndarray::array;

    fn two_layer(w: Array2<f64>, h: Array2<f64>) -> (NetworkParams, Architecture) {
        let arch = Architecture::new(2, 1, w.nrows(), vec![w.ncols()], Activation::Relu, h.ncols()).unwrap();
        let mut p = NetworkParams::zeros(&arch);
        p.weights[0][0] = w;
        p.head[0] = h;
        (p, arch)
    }

    #[test]
    fn am_gm_example() {
        let (p, arch) = two_layer(array![[2.0], [0.0]], array![[3.0]]);
        let (b, r) = balance_two_layer(&p, &arch, &Array2::eye(2)).unwrap();
        assert!((frobenius(&b.weights[0][0]) - 6f64.sqrt()).abs() < 1e-14);
        assert!((b.head[0][[0, 0]] - 6f64.sqrt()).abs() < 1e-14);
        assert!((r.objective_before - 6.5).abs() < 1e-14);
        assert!((r.objective_after - 6.0).abs() < 1e-14);
        assert!((half_sq(&b, &arch) - 6.0).abs() < 1e-13);
    }

    #[test]
    fn balanced_is_fixed_point() {
        let (p, arch) = two_layer(array![[0.6], [0.8]], array![[1.0]]);
        let (b, _) = balance_two_layer(&p, &arch, &Array2::eye(2)).unwrap();
        assert!(max_abs(&(&b.weights[0][0] - &p.weights[0][0])) < 1e-15);
    }

    #[test]
    fn degenerate_neuron() {
        let (p, arch) = two_layer(array![[0.0], [0.0]], array![[1.0]]);
        assert_eq!(
            balance_two_layer(&p, &arch, &Array2::eye(2)).unwrap_err(),
            Error::DegenerateNeuron { branch: 0, neuron: 0 }
        );
    }

    #[test]
    fn deep_geometric_mean() {
        let arch = Architecture::new(4, 1, 2, vec![2, 2, 1], Activation::Linear, 1).unwrap();
        let mut p = NetworkParams::zeros(&arch);
        p.weights[0][0] = array![[1.0, 0.0], [0.0, 0.0]];
        p.weights[0][1] = array![[4.0, 0.0], [0.0, 0.0]];
        p.weights[0][2] = array![[2.0], [0.0]];
        p.head[0] = array![[1.0]];
        let (b, r) = balance_deep(&p, &arch, &Array2::eye(2)).unwrap();
        assert!((frobenius(&b.weights[0][0]) - 2.0).abs() < 1e-14);
        assert!((frobenius(&b.weights[0][1]) - 2.0).abs() < 1e-14);
        assert!((b.head[0][[0, 0]] - 2.0).abs() < 1e-14);
        assert!(r.output_preserved());
        assert_eq!(b.branch_norms, Some(vec![2.0]));
    }

    #[test]
    fn zero_network_equivalence() {
        let (p, arch) = two_layer(Array2::zeros((2, 3)), Array2::zeros((3, 1)));
        let ds = Dataset::new(Array2::eye(2), array![[1.0], [2.0]]).unwrap();
        let e = verify_equivalence(&p, &arch, 0.3, &ds).unwrap();
        assert_eq!(e.l2_objective_before, 2.5);
        assert_eq!(e.rescaled_objective, 2.5);
    }
}
