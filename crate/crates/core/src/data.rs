//! Synthetic data, whitening, one-hot encoding and CSV tables.
//!
//! All randomness comes from `ChaCha8Rng::seed_from_u64(seed)`, a counter-based
//! generator with a fixed stream for a given seed on every platform.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::forward::predict;
use crate::linalg::svd;
use crate::train::init_params;
use crate::types::{Activation, Architecture, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    /// Standard normal X, balanced one-hot labels sorted by class.
    Gaussian,
    /// `X = c a0ᵀ`, standard normal labels.
    RankOne,
    /// Standard normal X, labels from a randomly initialized network.
    Teacher,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub seed: u64,
    /// Teacher network; defaults to a two-layer ReLU net of width 2K.
    pub teacher_arch: Option<Architecture>,
    /// Rank-one only: draw `c` from (0, 1] instead of N(0, 1).
    pub positive_c: bool,
}

impl GeneratorSpec {
    pub fn new(kind: GeneratorKind, n: usize, d: usize, k: usize, seed: u64) -> Self {
        GeneratorSpec { kind, n, d, k, seed, teacher_arch: None, positive_c: false }
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// Balanced class assignment in sorted order: row `i` gets class `⌊iK/n⌋`.
pub fn sorted_classes(n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|i| i * k / n).collect()
}

pub fn generate(spec: &GeneratorSpec) -> Result<Dataset> {
    if spec.n == 0 || spec.d == 0 || spec.k == 0 {
        return Err(Error::InvalidInput("n, d and K must all be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        GeneratorKind::Gaussian => {
            let x = normal_matrix(&mut rng, spec.n, spec.d);
            encode_classes(x, &sorted_classes(spec.n, spec.k), spec.k)
        }
        GeneratorKind::RankOne => {
            let c = if spec.positive_c {
                Array1::from_shape_fn(spec.n, |_| 1.0 - rng.random::<f64>())
            } else {
                Array1::from_shape_fn(spec.n, |_| rng.sample(StandardNormal))
            };
            let a0 = Array1::from_shape_fn(spec.d, |_| rng.sample(StandardNormal));
            let y = normal_matrix(&mut rng, spec.n, spec.k);
            Dataset::from_rank_one(c, a0, y)
        }
        GeneratorKind::Teacher => {
            let arch = match &spec.teacher_arch {
                Some(a) => a.clone(),
                None => Architecture::new(2, 1, spec.d, vec![2 * spec.k], Activation::Relu, spec.k)?,
            };
            if arch.input_dim != spec.d || arch.outputs != spec.k {
                return Err(Error::InvalidInput(format!(
                    "teacher maps {} -> {}, spec asks for {} -> {}",
                    arch.input_dim, arch.outputs, spec.d, spec.k
                )));
            }
            let x = normal_matrix(&mut rng, spec.n, spec.d);
            let teacher = init_params(&arch, 1.0, rng.random())?;
            let y = predict(&teacher, &arch, &x)?;
            Dataset::new(x, y)
        }
    }
}

/// Replaces X by `U V₁ᵀ` from its thin SVD so that `X Xᵀ = I`.
pub fn whiten(dataset: &Dataset) -> Result<Dataset> {
    let (n, d) = (dataset.n(), dataset.d());
    if n > d {
        return Err(Error::CannotWhiten(format!("n = {n} exceeds d = {d}")));
    }
    let f = svd(&dataset.x)?;
    if f.rank(1e-10) < n {
        return Err(Error::CannotWhiten(format!("x has rank {} < n = {n}", f.rank(1e-10))));
    }
    let v1 = f.v.slice(ndarray::s![.., ..n]);
    let x = f.u.dot(&v1.t());
    let mut out = Dataset::new(x, dataset.labels.clone())?;
    out.class_sizes = dataset.class_sizes.clone();
    out.mark_whitened()
}

/// n x K indicator matrix and the class sizes.
pub fn one_hot(labels: &[usize], k: usize) -> Result<(Array2<f64>, Vec<usize>)> {
    let mut y = Array2::zeros((labels.len(), k));
    let mut sizes = vec![0; k];
    for (i, &c) in labels.iter().enumerate() {
        if c >= k {
            return Err(Error::InvalidLabel { label: c, k });
        }
        y[[i, c]] = 1.0;
        sizes[c] += 1;
    }
    Ok((y, sizes))
}

/// One-hot dataset with rows sorted by class (stable) and class sizes
/// recorded. Unequal sizes are allowed; every class must be present.
pub fn encode_classes(x: Array2<f64>, labels: &[usize], k: usize) -> Result<Dataset> {
    if x.nrows() != labels.len() {
        return Err(Error::ShapeError(format!("{} rows, {} labels", x.nrows(), labels.len())));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| labels[i]);
    let sorted: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    let (y, sizes) = one_hot(&sorted, k)?;
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::InvalidInput(format!("class {empty} has no samples")));
    }
    Ok(Dataset::new(x.select(Axis(0), &order), y)?.with_class_sizes(sizes))
}

/// Labelled feature table as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Table {
    /// One-hot dataset with `K = max label + 1`, rows sorted by class.
    pub fn into_dataset(self) -> Result<Dataset> {
        let k = self.labels.iter().max().map_or(0, |m| m + 1);
        encode_classes(self.features, &self.labels, k)
    }
}

fn csv_err(e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.line() as usize);
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io(e.to_string()),
        _ => Error::ParseError { row, col: 0, msg: e.to_string() },
    }
}

/// Reads a table with a header row; the column named `label` holds integer
/// classes and every other column is a feature. Error rows are 1-based file
/// lines (the header is line 1), columns are 0-based.
pub fn load_table(path: impl AsRef<Path>) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path.as_ref()).map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.clone();
    let label_col = header.iter().position(|h| h.trim() == "label").ok_or_else(|| Error::ParseError {
        row: 1,
        col: header.len(),
        msg: "no column named \"label\"".into(),
    })?;
    let width = header.len();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != width {
            return Err(Error::ParseError { row, col: rec.len().min(width), msg: format!("expected {width} fields, found {}", rec.len()) });
        }
        for (col, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if col == label_col {
                let label = cell.parse::<usize>().map_err(|e| Error::ParseError { row, col, msg: format!("label {cell:?}: {e}") })?;
                labels.push(label);
            } else {
                let v = cell.parse::<f64>().map_err(|e| Error::ParseError { row, col, msg: format!("{cell:?}: {e}") })?;
                if !v.is_finite() {
                    return Err(Error::ParseError { row, col, msg: format!("non-finite value {cell:?}") });
                }
                values.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::ParseError { row: 2, col: 0, msg: "no data rows".into() });
    }
    let features = Array2::from_shape_vec((labels.len(), width - 1), values).expect("rectangular");
    Ok(Table { features, labels })
}

/// Writes `f0..f{d−1},label`. Values use the shortest representation that
/// parses back to the same bits.
pub fn save_table(table: &Table, path: impl AsRef<Path>) -> Result<()> {
    if table.features.nrows() != table.labels.len() {
        return Err(Error::ShapeError(format!("{} rows, {} labels", table.features.nrows(), table.labels.len())));
    }
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
    let d = table.features.ncols();
    let mut header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(csv_err)?;
    for (row, &label) in table.features.rows().into_iter().zip(&table.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        rec.push(label.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// [`load_table`] followed by one-hot encoding.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    load_table(path)?.into_dataset()
}

/// Writes a one-hot dataset as a table.
pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let labels = dataset
        .class_index()
        .ok_or_else(|| Error::PreconditionViolated("only one-hot datasets can be saved as class tables".into()))?;
    save_table(&Table { features: dataset.x.clone(), labels }, path)
}
