//! Forward evaluation of the branch network and its objectives.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_sq, norm};
use crate::types::{Activation, Architecture, Dataset, NetworkParams};

/// Centered norms below this are treated as a constant column.
pub const BN_EPS: f64 = 1e-12;

/// Activations of every hidden layer of every branch plus the summed output.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    /// `pre[j][l]`: input to the nonlinearity of hidden layer `l + 1`
    /// (before batch norm on the last hidden layer).
    pub pre: Vec<Vec<Array2<f64>>>,
    /// `activations[j][l]` is A_{l+1,j}.
    pub activations: Vec<Vec<Array2<f64>>>,
    pub output: Array2<f64>,
}

impl ActivationTrace {
    /// Last hidden activation of each branch.
    pub fn last_hidden(&self) -> Vec<&Array2<f64>> {
        self.activations.iter().map(|a| a.last().expect("at least one hidden layer")).collect()
    }
}

/// `P a / ‖P a‖ · gamma + 1 alpha / √n`, with `P` the centering projector.
pub fn batch_norm_column(a: ArrayView1<f64>, gamma: f64, alpha: f64) -> Result<Array1<f64>> {
    let n = a.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty column".into()));
    }
    let mean = a.sum() / n as f64;
    let centered = a.mapv(|v| v - mean);
    let c = norm(centered.view());
    if c <= BN_EPS {
        return Err(Error::ConstantActivation);
    }
    let shift = alpha / (n as f64).sqrt();
    Ok(centered.mapv(|v| v / c * gamma + shift))
}

fn act(activation: Activation, z: &mut Array2<f64>) {
    if activation == Activation::Relu {
        z.mapv_inplace(|v| v.max(0.0));
    }
}

/// Evaluates the network on `x`.
pub fn forward(params: &NetworkParams, arch: &Architecture, x: &Array2<f64>) -> Result<ActivationTrace> {
    let inputs = vec![x.view(); arch.branches];
    forward_with_inputs(params, arch, &inputs)
}

/// Evaluates the network when branch `j` reads its own input matrix `inputs[j]`.
///
/// Used for heads sitting on top of precomputed per-branch features.
pub fn forward_with_inputs(
    params: &NetworkParams,
    arch: &Architecture,
    inputs: &[ArrayView2<f64>],
) -> Result<ActivationTrace> {
    params.check(arch)?;
    if inputs.len() != arch.branches {
        return Err(Error::ShapeError(format!("expected {} branch inputs, got {}", arch.branches, inputs.len())));
    }
    let n = inputs[0].nrows();
    for (j, x) in inputs.iter().enumerate() {
        if x.ncols() != arch.input_dim || x.nrows() != n {
            return Err(Error::ShapeError(format!(
                "branch {j} input is {:?}, expected ({n}, {})",
                x.dim(),
                arch.input_dim
            )));
        }
    }
    let last = arch.hidden_layers() - 1;
    let mut output = Array2::<f64>::zeros((n, arch.outputs));
    let mut pre = Vec::with_capacity(arch.branches);
    let mut activations = Vec::with_capacity(arch.branches);
    for j in 0..arch.branches {
        let mut a = inputs[j].to_owned();
        let mut pre_j = Vec::with_capacity(arch.hidden_layers());
        let mut acts_j = Vec::with_capacity(arch.hidden_layers());
        for (l, w) in params.weights[j].iter().enumerate() {
            let mut z = a.dot(w);
            if l == last {
                if let Some(b) = &params.biases {
                    z += &b[j].view().insert_axis(Axis(0));
                }
            }
            pre_j.push(z.clone());
            if l == last && arch.batch_norm {
                let gamma = &params.bn_scale.as_ref().expect("checked")[j];
                let alpha = &params.bn_shift.as_ref().expect("checked")[j];
                for k in 0..z.ncols() {
                    let col = batch_norm_column(z.column(k), gamma[k], alpha[k])?;
                    z.column_mut(k).assign(&col);
                }
            }
            act(arch.activation, &mut z);
            a = z;
            acts_j.push(a.clone());
        }
        output += &a.dot(&params.head[j]);
        pre.push(pre_j);
        activations.push(acts_j);
    }
    Ok(ActivationTrace { pre, activations, output })
}

/// Just the network output.
pub fn predict(params: &NetworkParams, arch: &Architecture, x: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(forward(params, arch, x)?.output)
}

/// ½‖output − labels‖².
pub fn squared_loss(output: &Array2<f64>, labels: &Array2<f64>) -> f64 {
    0.5 * frobenius_sq(&(output - labels))
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidInput(format!("beta must be finite and >= 0, got {beta}")));
    }
    Ok(())
}

/// Squared-norm penalty used by [`primal_objective`], without the β/2 factor.
///
/// Batch-norm nets penalise only the scale, shift and head: the normalization
/// makes the earlier layers scale-free, so a penalty on them has no minimizer.
pub fn weight_penalty(params: &NetworkParams, arch: &Architecture) -> f64 {
    let mut s: f64 = params.head.iter().map(frobenius_sq).sum();
    if arch.batch_norm {
        for v in [&params.bn_scale, &params.bn_shift].into_iter().flatten() {
            s += v.iter().map(|b| b.dot(b)).sum::<f64>();
        }
    } else {
        s += params.weights.iter().flatten().map(frobenius_sq).sum::<f64>();
    }
    s
}

/// Training objective: squared loss plus (β/2) times the squared weight norms.
pub fn primal_objective(params: &NetworkParams, arch: &Architecture, dataset: &Dataset, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    let out = predict(params, arch, &dataset.x)?;
    check_labels(&out, dataset)?;
    Ok(squared_loss(&out, &dataset.labels) + 0.5 * beta * weight_penalty(params, arch))
}

fn check_labels(out: &Array2<f64>, dataset: &Dataset) -> Result<()> {
    if out.dim() != dataset.labels.dim() {
        return Err(Error::ShapeError(format!("output {:?} vs labels {:?}", out.dim(), dataset.labels.dim())));
    }
    Ok(())
}

/// Per-unit scale of the last hidden layer: column norm of W_{L-1}, or
/// `sqrt(γ² + α²)` under batch norm.
pub fn unit_scales(params: &NetworkParams, arch: &Architecture, branch: usize) -> Array1<f64> {
    let m = arch.last_width();
    if arch.batch_norm {
        let g = &params.bn_scale.as_ref().expect("bn params")[branch];
        let a = &params.bn_shift.as_ref().expect("bn params")[branch];
        Array1::from_shape_fn(m, |k| g[k].hypot(a[k]))
    } else {
        let w = params.weights[branch].last().expect("hidden layer");
        Array1::from_shape_fn(m, |k| norm(w.column(k)))
    }
}

/// The path penalty Σ_j Σ_k scale_k · ‖row_k(head_j)‖.
pub fn path_penalty(params: &NetworkParams, arch: &Architecture) -> f64 {
    (0..arch.branches)
        .map(|j| {
            let s = unit_scales(params, arch, j);
            params.head[j].rows().into_iter().zip(s.iter()).map(|(r, sk)| sk * norm(r)).sum::<f64>()
        })
        .sum()
}

/// Rescaled objective: squared loss plus β times [`path_penalty`].
///
/// For inner layers held at a fixed Frobenius radius this is the quantity the
/// dual certificates bound; the constant contribution of the inner layers is
/// left out.
pub fn canonical_objective(params: &NetworkParams, arch: &Architecture, dataset: &Dataset, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    let out = predict(params, arch, &dataset.x)?;
    check_labels(&out, dataset)?;
    Ok(squared_loss(&out, &dataset.labels) + beta * path_penalty(params, arch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bn_formula() {
        let out = batch_norm_column(array![1.0, 2.0, 3.0, 4.0].view(), 1.0, 0.0).unwrap();
        let s = 5f64.sqrt();
        let want = array![-1.5, -0.5, 0.5, 1.5] / s;
        for (a, b) in out.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        let out = batch_norm_column(array![1.0, 2.0].view(), 0.0, 3.0).unwrap();
        assert!(out.iter().all(|v| (v - 3.0 / 2f64.sqrt()).abs() < 1e-15));
        assert_eq!(batch_norm_column(array![2.0, 2.0].view(), 1.0, 0.0), Err(Error::ConstantActivation));
    }

    #[test]
    fn bn_one_hot_column_identity() {
        let y = array![1.0, 1.0, 0.0, 0.0];
        let h = 0.5f64.sqrt();
        let out = batch_norm_column(y.view(), h, h).unwrap();
        let want = &y / 2f64.sqrt();
        for (a, b) in out.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_chain_propagates() {
        let arch = Architecture::new(3, 1, 2, vec![2, 1], Activation::Linear, 1).unwrap();
        let mut p = NetworkParams::zeros(&arch);
        p.weights[0][0] = Array2::eye(2);
        p.weights[0][1] = array![[1.0], [1.0]];
        p.head[0] = array![[5.0]];
        let out = predict(&p, &arch, &Array2::eye(2)).unwrap();
        assert_eq!(out, array![[5.0], [5.0]]);
    }

    #[test]
    fn relu_kills_negative() {
        let arch = Architecture::chain(2, 1, 2, 1, Activation::Relu, 1).unwrap();
        let mut p = NetworkParams::zeros(&arch);
        p.weights[0][0] = array![[-1.0], [-1.0]];
        p.head[0] = array![[3.0]];
        let out = predict(&p, &arch, &array![[1.0, 2.0], [0.5, 0.0]]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_net_objective() {
        let arch = Architecture::chain(3, 2, 2, 2, Activation::Relu, 2).unwrap();
        let p = NetworkParams::zeros(&arch);
        let ds = Dataset::new(Array2::eye(2), array![[1.0, 2.0], [0.0, 1.0]]).unwrap();
        assert_eq!(primal_objective(&p, &arch, &ds, 0.7).unwrap(), 3.0);
        assert_eq!(canonical_objective(&p, &arch, &ds, 0.7).unwrap(), 3.0);
    }

    #[test]
    fn shape_mismatch() {
        let arch = Architecture::chain(2, 1, 2, 1, Activation::Relu, 1).unwrap();
        let p = NetworkParams::zeros(&arch);
        assert!(matches!(forward(&p, &arch, &Array2::zeros((3, 3))), Err(Error::ShapeError(_))));
    }
}
