//! Shared domain types: datasets, architectures and parameter sets.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::linalg::{frobenius, max_abs, outer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Linear,
    Relu,
}

/// Branch-parallel network layout.
///
/// Each of `branches` chains maps the input through `depth - 1` hidden layers
/// of the given `widths`; the chains are summed by their own head matrices.
/// With `depth == 2` and width-one branches this is an ordinary two-layer net
/// with `branches` neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub depth: usize,
    pub branches: usize,
    pub input_dim: usize,
    /// Hidden widths m_1 .. m_{L-1}.
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// Bias on the last hidden layer.
    pub last_hidden_bias: bool,
    /// Batch normalisation on the last hidden layer (requires ReLU).
    pub batch_norm: bool,
    pub outputs: usize,
}

impl Architecture {
    pub fn new(
        depth: usize,
        branches: usize,
        input_dim: usize,
        widths: Vec<usize>,
        activation: Activation,
        outputs: usize,
    ) -> Result<Self> {
        let a = Architecture {
            depth,
            branches,
            input_dim,
            widths,
            activation,
            last_hidden_bias: false,
            batch_norm: false,
            outputs,
        };
        a.validate()?;
        Ok(a)
    }

    /// `depth` layers, every branch with the same hidden width and a single
    /// unit feeding the head.
    pub fn chain(
        depth: usize,
        branches: usize,
        input_dim: usize,
        width: usize,
        activation: Activation,
        outputs: usize,
    ) -> Result<Self> {
        if depth < 2 {
            return Err(Error::InvalidInput("depth must be at least 2".into()));
        }
        let mut widths = vec![width; depth - 1];
        widths[depth - 2] = 1;
        Self::new(depth, branches, input_dim, widths, activation, outputs)
    }

    pub fn with_bias(mut self) -> Self {
        self.last_hidden_bias = true;
        self
    }

    pub fn with_batch_norm(mut self) -> Result<Self> {
        self.batch_norm = true;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidInput(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.branches == 0 || self.outputs == 0 || self.input_dim == 0 {
            return Err(Error::InvalidInput("branches, outputs and input_dim must be positive".into()));
        }
        if self.widths.len() != self.depth - 1 {
            return Err(Error::InvalidInput(format!(
                "expected {} hidden widths, got {}",
                self.depth - 1,
                self.widths.len()
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidInput("widths must be positive".into()));
        }
        if self.batch_norm && self.activation != Activation::Relu {
            return Err(Error::InvalidInput("batch norm requires relu activation".into()));
        }
        Ok(())
    }

    /// Input and output size of hidden layer `l` (0-based, l < depth - 1).
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        let fan_in = if l == 0 { self.input_dim } else { self.widths[l - 1] };
        (fan_in, self.widths[l])
    }

    pub fn last_width(&self) -> usize {
        self.widths[self.depth - 2]
    }

    pub fn hidden_layers(&self) -> usize {
        self.depth - 1
    }
}

/// Per-branch weights. `weights[j][l]` is hidden layer `l + 1` of branch `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub weights: Vec<Vec<Array2<f64>>>,
    /// `head[j]` is m_{L-1} x K.
    pub head: Vec<Array2<f64>>,
    pub biases: Option<Vec<Array1<f64>>>,
    pub bn_scale: Option<Vec<Array1<f64>>>,
    pub bn_shift: Option<Vec<Array1<f64>>>,
    /// Common Frobenius norm t_j of the inner layers 1..L-2, when known.
    pub branch_norms: Option<Vec<f64>>,
}

impl NetworkParams {
    pub fn zeros(arch: &Architecture) -> Self {
        let weights = (0..arch.branches)
            .map(|_| (0..arch.hidden_layers()).map(|l| Array2::zeros(arch.layer_shape(l))).collect())
            .collect();
        let head = (0..arch.branches).map(|_| Array2::zeros((arch.last_width(), arch.outputs))).collect();
        let m = arch.last_width();
        NetworkParams {
            weights,
            head,
            biases: arch.last_hidden_bias.then(|| vec![Array1::zeros(m); arch.branches]),
            bn_scale: arch.batch_norm.then(|| vec![Array1::ones(m); arch.branches]),
            bn_shift: arch.batch_norm.then(|| vec![Array1::zeros(m); arch.branches]),
            branch_norms: None,
        }
    }

    pub fn check(&self, arch: &Architecture) -> Result<()> {
        arch.validate()?;
        let bad = |msg: String| Err(Error::ShapeError(msg));
        if self.weights.len() != arch.branches || self.head.len() != arch.branches {
            return bad(format!("expected {} branches", arch.branches));
        }
        for (j, layers) in self.weights.iter().enumerate() {
            if layers.len() != arch.hidden_layers() {
                return bad(format!("branch {j}: expected {} hidden layers, got {}", arch.hidden_layers(), layers.len()));
            }
            for (l, w) in layers.iter().enumerate() {
                if w.dim() != arch.layer_shape(l) {
                    return bad(format!("branch {j} layer {}: expected {:?}, got {:?}", l + 1, arch.layer_shape(l), w.dim()));
                }
            }
            if self.head[j].dim() != (arch.last_width(), arch.outputs) {
                return bad(format!("branch {j} head: expected {:?}, got {:?}", (arch.last_width(), arch.outputs), self.head[j].dim()));
            }
        }
        let m = arch.last_width();
        let check_vecs = |name: &str, v: &Option<Vec<Array1<f64>>>, needed: bool| -> Result<()> {
            match (v, needed) {
                (Some(v), true) => {
                    if v.len() != arch.branches || v.iter().any(|b| b.len() != m) {
                        return Err(Error::ShapeError(format!("{name}: expected {} vectors of length {m}", arch.branches)));
                    }
                    Ok(())
                }
                (None, true) => Err(Error::ShapeError(format!("{name} missing"))),
                (Some(_), false) => Err(Error::ShapeError(format!("{name} present but not enabled in architecture"))),
                (None, false) => Ok(()),
            }
        };
        check_vecs("biases", &self.biases, arch.last_hidden_bias)?;
        check_vecs("bn_scale", &self.bn_scale, arch.batch_norm)?;
        check_vecs("bn_shift", &self.bn_shift, arch.batch_norm)?;
        if let Some(t) = &self.branch_norms {
            if t.len() != arch.branches {
                return bad("branch_norms length".into());
            }
            for (j, layers) in self.weights.iter().enumerate() {
                for w in layers.iter().take(arch.depth.saturating_sub(2)) {
                    if (frobenius(w) - t[j]).abs() > 1e-9 * (1.0 + t[j]) && self.head[j].iter().any(|h| *h != 0.0) {
                        return bad(format!("branch {j}: inner layer norm {} differs from recorded {}", frobenius(w), t[j]));
                    }
                }
            }
        }
        Ok(())
    }

    /// Sum of squared Frobenius norms over every weight, head, scale and shift.
    pub fn squared_norm(&self) -> f64 {
        let mut s = 0.0;
        for layers in &self.weights {
            for w in layers {
                s += w.iter().map(|x| x * x).sum::<f64>();
            }
        }
        for h in &self.head {
            s += h.iter().map(|x| x * x).sum::<f64>();
        }
        for v in [&self.bn_scale, &self.bn_shift].into_iter().flatten() {
            for b in v {
                s += b.iter().map(|x| x * x).sum::<f64>();
            }
        }
        s
    }

    /// Flattened view of every trainable scalar (weights, head, biases, bn) in a fixed order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(|x| out.push(*x));
        out
    }

    pub fn from_flat(&self, flat: &[f64]) -> Self {
        let mut p = self.clone();
        let mut i = 0;
        p.visit_mut(|x| {
            *x = flat[i];
            i += 1;
        });
        p
    }

    pub fn visit(&self, mut f: impl FnMut(&f64)) {
        for layers in &self.weights {
            for w in layers {
                w.iter().for_each(&mut f);
            }
        }
        for h in &self.head {
            h.iter().for_each(&mut f);
        }
        for v in [&self.biases, &self.bn_scale, &self.bn_shift].into_iter().flatten() {
            for b in v {
                b.iter().for_each(&mut f);
            }
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for layers in &mut self.weights {
            for w in layers {
                w.iter_mut().for_each(&mut f);
            }
        }
        for h in &mut self.head {
            h.iter_mut().for_each(&mut f);
        }
        for v in [&mut self.biases, &mut self.bn_scale, &mut self.bn_shift].into_iter().flatten() {
            for b in v {
                b.iter_mut().for_each(&mut f);
            }
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(|_| n += 1);
        n
    }

    /// `self + s * other`, entrywise over every parameter.
    pub fn axpy(&self, s: f64, other: &NetworkParams) -> NetworkParams {
        let mut out = self.clone();
        out.axpy_mut(s, other);
        out
    }

    /// In-place `self += s * other`.
    pub fn axpy_mut(&mut self, s: f64, other: &NetworkParams) {
        for (a, b) in self.weights.iter_mut().flatten().zip(other.weights.iter().flatten()) {
            a.scaled_add(s, b);
        }
        for (a, b) in self.head.iter_mut().zip(&other.head) {
            a.scaled_add(s, b);
        }
        for (a, b) in [&mut self.biases, &mut self.bn_scale, &mut self.bn_shift]
            .into_iter()
            .zip([&other.biases, &other.bn_scale, &other.bn_shift])
        {
            if let (Some(a), Some(b)) = (a, b) {
                for (x, y) in a.iter_mut().zip(b) {
                    x.scaled_add(s, y);
                }
            }
        }
    }

    pub fn dot(&self, other: &NetworkParams) -> f64 {
        let mut s = 0.0;
        for (a, b) in self.weights.iter().flatten().zip(other.weights.iter().flatten()) {
            s += (a * b).sum();
        }
        for (a, b) in self.head.iter().zip(&other.head) {
            s += (a * b).sum();
        }
        for (a, b) in [&self.biases, &self.bn_scale, &self.bn_shift]
            .into_iter()
            .zip([&other.biases, &other.bn_scale, &other.bn_shift])
        {
            if let (Some(a), Some(b)) = (a, b) {
                for (x, y) in a.iter().zip(b) {
                    s += x.dot(y);
                }
            }
        }
        s
    }
}

/// Features, labels and structural facts about them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub labels: Array2<f64>,
    /// `(c, a0)` with `x = c a0^T`.
    pub rank_one: Option<(Array1<f64>, Array1<f64>)>,
    pub whitened: bool,
    pub class_sizes: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, labels: Array2<f64>) -> Result<Self> {
        if x.nrows() != labels.nrows() {
            return Err(Error::ShapeError(format!("x has {} rows, labels {}", x.nrows(), labels.nrows())));
        }
        if x.nrows() == 0 || x.ncols() == 0 || labels.ncols() == 0 {
            return Err(Error::InvalidInput("empty dataset".into()));
        }
        if x.iter().chain(labels.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("dataset has non-finite entries".into()));
        }
        Ok(Dataset { x, labels, rank_one: None, whitened: false, class_sizes: None })
    }

    /// Scalar-label dataset.
    pub fn scalar(x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        let n = y.len();
        Self::new(x, y.into_shape_with_order((n, 1)).expect("column"))
    }

    /// Rank-one dataset `x = c a0^T`.
    pub fn from_rank_one(c: Array1<f64>, a0: Array1<f64>, labels: Array2<f64>) -> Result<Self> {
        let x = outer(c.view(), a0.view());
        let mut ds = Self::new(x, labels)?;
        ds.rank_one = Some((c, a0));
        Ok(ds)
    }

    /// One-dimensional inputs, stored as the rank-one pair `(x, [1])`.
    pub fn one_dimensional(xs: &[f64], ys: &[f64]) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::ShapeError("x and y lengths differ".into()));
        }
        let labels = Array2::from_shape_vec((ys.len(), 1), ys.to_vec()).expect("column");
        Self::from_rank_one(Array1::from(xs.to_vec()), Array1::from(vec![1.0]), labels)
    }

    /// Marks the dataset as whitened after checking `x x^T = I`.
    pub fn mark_whitened(mut self) -> Result<Self> {
        let g = self.x.dot(&self.x.t()) - Array2::<f64>::eye(self.n());
        let err = max_abs(&g);
        if err > 1e-8 {
            return Err(Error::PreconditionViolated(format!("x x^T deviates from identity by {err:.3e}")));
        }
        self.whitened = true;
        Ok(self)
    }

    pub fn with_class_sizes(mut self, sizes: Vec<usize>) -> Self {
        self.class_sizes = Some(sizes);
        self
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }
    pub fn d(&self) -> usize {
        self.x.ncols()
    }
    pub fn k(&self) -> usize {
        self.labels.ncols()
    }

    /// Checks the declared structural invariants.
    pub fn validate(&self) -> Result<()> {
        if let Some((c, a0)) = &self.rank_one {
            if c.len() != self.n() || a0.len() != self.d() {
                return Err(Error::ShapeError("rank-one factors do not match x".into()));
            }
            let scale = max_abs(&self.x);
            let err = max_abs(&(&self.x - &outer(c.view(), a0.view())));
            if err > 1e-12 * scale.max(f64::MIN_POSITIVE) {
                return Err(Error::PreconditionViolated(format!("x differs from c a0^T by {err:.3e}")));
            }
        }
        if self.whitened {
            let g = self.x.dot(&self.x.t()) - Array2::<f64>::eye(self.n());
            if max_abs(&g) > 1e-8 {
                return Err(Error::PreconditionViolated("whitened flag set but x x^T != I".into()));
            }
        }
        Ok(())
    }

    /// True when every row has exactly one unit entry and zeros elsewhere.
    pub fn is_one_hot(&self) -> bool {
        self.labels.rows().into_iter().all(|r| {
            let ones = r.iter().filter(|&&v| v == 1.0).count();
            let zeros = r.iter().filter(|&&v| v == 0.0).count();
            ones == 1 && ones + zeros == r.len()
        })
    }

    /// Class index of each row for one-hot labels.
    pub fn class_index(&self) -> Option<Vec<usize>> {
        if !self.is_one_hot() {
            return None;
        }
        Some(
            self.labels
                .rows()
                .into_iter()
                .map(|r| r.iter().position(|&v| v == 1.0).expect("one-hot"))
                .collect(),
        )
    }
}
