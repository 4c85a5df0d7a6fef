//! Reference trainer: analytic gradients of the squared-norm objective and
//! heavy-ball SGD.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::forward::{squared_loss, weight_penalty, BN_EPS};
use crate::linalg::norm;
use crate::probes::StructureReport;
use crate::types::{Activation, Architecture, Dataset, NetworkParams};

/// Objectives above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub beta: f64,
    pub seed: u64,
    /// Steps between structure snapshots; 0 records only the first and last.
    pub probe_every: usize,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            momentum: 0.9,
            steps: 50_000,
            batch_size: 0,
            beta: 0.0,
            seed: 0,
            probe_every: 1_000,
            init_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidInput(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidInput("steps must be at least 1".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidInput(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    /// Full-data squared-norm objective.
    pub objective: f64,
    pub report: StructureReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    /// Objective of the batch used at each step, before the update.
    pub batch_objectives: Vec<f64>,
    pub params: NetworkParams,
}

impl Trajectory {
    pub fn final_objective(&self) -> f64 {
        self.snapshots.last().map_or(f64::NAN, |s| s.objective)
    }
}

/// Weights, head and biases uniform in `±scale/√fan_in`; BN scale 1, shift 0.
pub fn init_params(arch: &Architecture, scale: f64, seed: u64) -> Result<NetworkParams> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidInput(format!("init scale must be positive, got {scale}")));
    }
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = NetworkParams::zeros(arch);
    let fill = |m: &mut Array2<f64>, rng: &mut ChaCha8Rng| {
        let bound = scale / (m.nrows() as f64).sqrt();
        m.mapv_inplace(|_| rng.random_range(-bound..=bound));
    };
    for j in 0..arch.branches {
        for w in p.weights[j].iter_mut() {
            fill(w, &mut rng);
        }
        fill(&mut p.head[j], &mut rng);
    }
    if let Some(b) = p.biases.as_mut() {
        let (fan_in, _) = arch.layer_shape(arch.hidden_layers() - 1);
        let bound = scale / (fan_in as f64).sqrt();
        for v in b.iter_mut() {
            v.mapv_inplace(|_| rng.random_range(-bound..=bound));
        }
    }
    if let Some(g) = p.bn_scale.as_mut() {
        g.iter_mut().for_each(|v| v.fill(1.0));
    }
    Ok(p)
}

struct BnCache {
    unit: Array2<f64>,
    norms: Array1<f64>,
}

/// Objective `½‖f(X) − Y‖² + (β/2)·penalty` and its exact gradient.
///
/// The ReLU derivative at 0 is taken as 0.
pub fn objective_and_gradients(
    params: &NetworkParams,
    arch: &Architecture,
    batch: &Dataset,
    beta: f64,
) -> Result<(f64, NetworkParams)> {
    params.check(arch)?;
    let x = &batch.x;
    if x.ncols() != arch.input_dim || batch.k() != arch.outputs {
        return Err(Error::ShapeError(format!(
            "batch is {:?} -> {}, net expects {} -> {}",
            x.dim(),
            batch.k(),
            arch.input_dim,
            arch.outputs
        )));
    }
    let n = x.nrows();
    let rn = (n as f64).sqrt();
    let last = arch.hidden_layers() - 1;
    let relu = arch.activation == Activation::Relu;

    let mut acts: Vec<Vec<Array2<f64>>> = Vec::with_capacity(arch.branches);
    let mut caches: Vec<Option<BnCache>> = Vec::with_capacity(arch.branches);
    let mut output = Array2::<f64>::zeros((n, arch.outputs));
    for j in 0..arch.branches {
        let mut a_j = vec![x.clone()];
        let mut cache = None;
        for l in 0..=last {
            let mut z = a_j[l].dot(&params.weights[j][l]);
            if l == last {
                if let Some(b) = &params.biases {
                    z += &b[j].view().insert_axis(Axis(0));
                }
                if arch.batch_norm {
                    let gamma = &params.bn_scale.as_ref().expect("checked")[j];
                    let alpha = &params.bn_shift.as_ref().expect("checked")[j];
                    let mean = z.mean_axis(Axis(0)).expect("rows");
                    let mut unit = &z - &mean.insert_axis(Axis(0));
                    let mut norms = Array1::zeros(z.ncols());
                    for (k, mut col) in unit.columns_mut().into_iter().enumerate() {
                        let r = norm(col.view());
                        if r <= BN_EPS {
                            return Err(Error::ConstantActivation);
                        }
                        col /= r;
                        norms[k] = r;
                    }
                    z = &unit * &gamma.view().insert_axis(Axis(0)) + &(alpha / rn).insert_axis(Axis(0));
                    cache = Some(BnCache { unit, norms });
                }
            }
            if relu {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a_j.push(z);
        }
        output += &a_j[last + 1].dot(&params.head[j]);
        acts.push(a_j);
        caches.push(cache);
    }
    let objective = squared_loss(&output, &batch.labels) + 0.5 * beta * weight_penalty(params, arch);
    let resid = &output - &batch.labels;

    let mut grad = NetworkParams::zeros(arch);
    grad.branch_norms = None;
    for j in 0..arch.branches {
        let a_j = &acts[j];
        grad.head[j] = a_j[last + 1].t().dot(&resid) + &(&params.head[j] * beta);
        let mut d_act = resid.dot(&params.head[j].t());
        for l in (0..=last).rev() {
            let mut dz = d_act;
            if relu {
                dz.zip_mut_with(&a_j[l + 1], |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            if l == last {
                if let Some(c) = &caches[j] {
                    let gamma = &params.bn_scale.as_ref().expect("checked")[j];
                    let alpha = &params.bn_shift.as_ref().expect("checked")[j];
                    let dg = &mut grad.bn_scale.as_mut().expect("bn")[j];
                    let da = &mut grad.bn_shift.as_mut().expect("bn")[j];
                    for k in 0..dz.ncols() {
                        let d_out = dz.column(k).to_owned();
                        let u = c.unit.column(k);
                        dg[k] = d_out.dot(&u) + beta * gamma[k];
                        da[k] = d_out.sum() / rn + beta * alpha[k];
                        let du = &d_out * gamma[k];
                        let dc = (&du - &(&u * u.dot(&du))) / c.norms[k];
                        let m = dc.mean().expect("rows");
                        dz.column_mut(k).assign(&dc.mapv(|v| v - m));
                    }
                }
                if let Some(b) = grad.biases.as_mut() {
                    b[j] = dz.sum_axis(Axis(0));
                }
            }
            let mut dw = a_j[l].t().dot(&dz);
            if !arch.batch_norm {
                dw += &(&params.weights[j][l] * beta);
            }
            grad.weights[j][l] = dw;
            d_act = dz.dot(&params.weights[j][l].t());
        }
    }
    Ok((objective, grad))
}

/// Gradient of [`crate::forward::primal_objective`] on `batch`.
pub fn gradients(params: &NetworkParams, arch: &Architecture, batch: &Dataset, beta: f64) -> Result<NetworkParams> {
    Ok(objective_and_gradients(params, arch, batch, beta)?.1)
}

/// [`fd_check_seeded`] with seed 0.
pub fn fd_check(params: &NetworkParams, arch: &Architecture, dataset: &Dataset, beta: f64, epsilon: f64) -> Result<f64> {
    fd_check_seeded(params, arch, dataset, beta, epsilon, 0)
}

/// Largest error between analytic and central-difference partial derivatives
/// over up to 64 random coordinates, relative to `max(1, |analytic|, |fd|)`.
pub fn fd_check_seeded(
    params: &NetworkParams,
    arch: &Architecture,
    dataset: &Dataset,
    beta: f64,
    epsilon: f64,
    seed: u64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidInput(format!("epsilon must lie in [1e-7, 1e-3], got {epsilon}")));
    }
    let analytic = gradients(params, arch, dataset, beta)?.to_flat();
    let flat = params.to_flat();
    let mut coords: Vec<usize> = (0..flat.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    coords.truncate(64);
    let eval = |i: usize, delta: f64| -> Result<f64> {
        let mut f = flat.clone();
        f[i] += delta;
        Ok(objective_and_gradients(&params.from_flat(&f), arch, dataset, beta)?.0)
    };
    let mut worst = 0.0_f64;
    for i in coords {
        let fd = (eval(i, epsilon)? - eval(i, -epsilon)?) / (2.0 * epsilon);
        let err = (analytic[i] - fd).abs() / 1f64.max(analytic[i].abs()).max(fd.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Magnitude below which parameters are set to zero during training.
pub const FLUSH_TO_ZERO: f64 = 1e-100;

fn flush_tiny(x: &mut f64) {
    if x.abs() < FLUSH_TO_ZERO {
        *x = 0.0;
    }
}

/// Gradient of `(β/2) · weight_penalty`.
fn penalty_gradient(params: &NetworkParams, arch: &Architecture, beta: f64) -> NetworkParams {
    let mut g = params.clone();
    g.branch_norms = None;
    if arch.batch_norm {
        g.weights.iter_mut().flatten().for_each(|w| w.fill(0.0));
    }
    if let Some(b) = g.biases.as_mut() {
        b.iter_mut().for_each(|v| v.fill(0.0));
    }
    g.visit_mut(|x| *x *= beta);
    g
}

fn take_rows(dataset: &Dataset, rows: &[usize]) -> Result<Dataset> {
    Dataset::new(dataset.x.select(Axis(0), rows), dataset.labels.select(Axis(0), rows))
}

/// Heavy-ball SGD from `params`. Minibatch gradients are rescaled by
/// `n / batch` so they estimate the full-data gradient.
pub fn run_training(
    params: &NetworkParams,
    arch: &Architecture,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<Trajectory> {
    config.validate()?;
    params.check(arch)?;
    let n = dataset.n();
    let full = config.batch_size == 0 || config.batch_size >= n;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;

    let mut theta = params.clone();
    theta.branch_norms = None;
    let mut velocity = NetworkParams::zeros(arch);
    velocity.branch_norms = None;
    let mut snapshots = Vec::new();
    let mut batch_objectives = Vec::with_capacity(config.steps);
    let snapshot = |theta: &NetworkParams, step: usize| -> Result<Snapshot> {
        let (objective, _) = objective_and_gradients(theta, arch, dataset, config.beta)?;
        let report = StructureReport::measure(theta, arch, Some(dataset))?;
        Ok(Snapshot { step, objective, report })
    };
    snapshots.push(snapshot(&theta, 0)?);

    for step in 1..=config.steps {
        let (objective, grad) = if full {
            objective_and_gradients(&theta, arch, dataset, config.beta)?
        } else {
            if cursor + config.batch_size > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let rows = &order[cursor..cursor + config.batch_size];
            cursor += config.batch_size;
            let batch = take_rows(dataset, rows)?;
            let (loss_obj, g) = objective_and_gradients(&theta, arch, &batch, 0.0)?;
            let scale = n as f64 / config.batch_size as f64;
            let mut full_grad = penalty_gradient(&theta, arch, config.beta);
            full_grad.axpy_mut(scale, &g);
            (loss_obj * scale + 0.5 * config.beta * weight_penalty(&theta, arch), full_grad)
        };
        if !objective.is_finite() || objective > DIVERGENCE_LIMIT {
            return Err(Error::Diverged { step, objective });
        }
        batch_objectives.push(objective);
        let mut next = grad;
        next.axpy_mut(config.momentum, &velocity);
        velocity = next;
        theta.axpy_mut(-config.learning_rate, &velocity);
        // Weight decay drives unused weights toward the subnormal range, where
        // arithmetic is orders of magnitude slower.
        velocity.visit_mut(flush_tiny);
        theta.visit_mut(flush_tiny);
        let probe = config.probe_every > 0 && step % config.probe_every == 0;
        if probe || step == config.steps {
            let s = snapshot(&theta, step)?;
            if !s.objective.is_finite() || s.objective > DIVERGENCE_LIMIT {
                return Err(Error::Diverged { step, objective: s.objective });
            }
            snapshots.push(s);
        }
    }
    Ok(Trajectory { snapshots, batch_objectives, params: theta })
}
