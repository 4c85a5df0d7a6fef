mod certify;
mod linear;
mod relu;
mod spline;
mod training;

use std::collections::BTreeMap;

use duality_nets_core::data::{generate, load_table, whiten, GeneratorKind, GeneratorSpec};
use duality_nets_core::{Activation, Architecture, Dataset, NetworkParams, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{ActivationName, ConfigError, Experiment, ExperimentConfig, Generator};
use crate::plot::Chart;
use crate::report::{Assertion, Row};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config error at {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] duality_nets_core::Error),
}

pub type RunResult<T> = Result<T, RunError>;

/// Everything an experiment hands back for reporting.
pub struct Outcome {
    pub rows: Vec<Row>,
    pub metrics: BTreeMap<String, f64>,
    pub assertions: Vec<Assertion>,
    pub chart: Chart,
    /// Extra JSON artifacts written next to the report.
    pub files: Vec<(String, Value)>,
}

impl Outcome {
    fn new(chart: Chart) -> Self {
        Outcome { rows: vec![], metrics: BTreeMap::new(), assertions: vec![], chart, files: vec![] }
    }

    fn row(&mut self, x: f64, metric: impl Into<String>, value: f64) {
        self.rows.push(Row::new(x, metric, value));
    }

    fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    fn check(&mut self, a: Assertion) {
        self.assertions.push(a);
    }
}

/// Resolved configuration plus the master seed.
pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub seed: u64,
}

/// Generator settings used when the config leaves them out.
#[derive(Debug, Clone, Copy)]
pub struct DataDefaults {
    pub generator: Generator,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub whiten: bool,
    pub positive_c: bool,
}

impl DataDefaults {
    pub fn new(generator: Generator, n: usize, d: usize, k: usize) -> Self {
        DataDefaults { generator, n, d, k, whiten: false, positive_c: false }
    }

    pub fn whitened(mut self) -> Self {
        self.whiten = true;
        self
    }
}

impl Ctx {
    pub fn data_seed(&self) -> u64 {
        self.cfg.dataset.as_ref().and_then(|d| d.seed).unwrap_or(self.seed)
    }

    pub fn init_seed(&self) -> u64 {
        self.cfg.train.as_ref().and_then(|t| t.init_seed).unwrap_or(self.seed.wrapping_add(1))
    }

    pub fn beta_or(&self, default: f64) -> f64 {
        self.cfg.beta.unwrap_or(default)
    }

    pub fn depths_or(&self, default: &[usize]) -> Vec<usize> {
        self.cfg.depths.clone().unwrap_or_else(|| default.to_vec())
    }

    pub fn seeds_or(&self, default: &[u64]) -> Vec<u64> {
        self.cfg.seeds.clone().unwrap_or_else(|| default.to_vec())
    }

    /// First configured width, for constructions that take a single width.
    pub fn width_or(&self, default: usize) -> usize {
        self.cfg.arch.as_ref().and_then(|a| a.widths.as_ref()).and_then(|w| w.first().copied()).unwrap_or(default)
    }

    pub fn dataset(&self, def: DataDefaults) -> RunResult<Dataset> {
        let d = self.cfg.dataset.clone().unwrap_or_default();
        let whiten_it = d.whiten.unwrap_or(def.whiten);
        let ds = if let Some(path) = &d.csv {
            load_table(path)?.into_dataset()?
        } else {
            let (n, dim, k) = (d.n.unwrap_or(def.n), d.d.unwrap_or(def.d), d.k.unwrap_or(def.k));
            let seed = self.data_seed();
            let kind = match d.generator.unwrap_or(def.generator) {
                Generator::Spline => return Ok(spline_points(n, seed)?),
                Generator::Gaussian => GeneratorKind::Gaussian,
                Generator::RankOne => GeneratorKind::RankOne,
                Generator::Teacher => GeneratorKind::Teacher,
            };
            let mut spec = GeneratorSpec::new(kind, n, dim, k, seed);
            spec.positive_c = d.positive_c.unwrap_or(def.positive_c);
            generate(&spec)?
        };
        Ok(if whiten_it { whiten(&ds)? } else { ds })
    }

    /// `default` with any configured architecture fields applied; input and
    /// output sizes always follow the data.
    pub fn arch(&self, ds: &Dataset, default: Architecture) -> RunResult<Architecture> {
        let a = self.cfg.arch.clone().unwrap_or_default();
        let depth = a.depth.unwrap_or(default.depth);
        let widths = match a.widths {
            Some(w) => w,
            None if depth == default.depth => default.widths.clone(),
            None => return Err(ConfigError::at("/arch/widths", format!("depth {depth} needs explicit widths")).into()),
        };
        let activation = match a.activation {
            Some(ActivationName::Linear) => Activation::Linear,
            Some(ActivationName::Relu) => Activation::Relu,
            None => default.activation,
        };
        let mut arch =
            Architecture::new(depth, a.branches.unwrap_or(default.branches), ds.d(), widths, activation, ds.k())?;
        if a.bias.unwrap_or(default.last_hidden_bias) {
            arch = arch.with_bias();
        }
        if a.batch_norm.unwrap_or(default.batch_norm) {
            arch = arch.with_batch_norm()?;
        }
        Ok(arch)
    }

    /// Training settings: config values over `default`; `beta` is left to the caller.
    pub fn train_config(&self, default: TrainConfig) -> TrainConfig {
        let t = self.cfg.train.clone().unwrap_or_default();
        TrainConfig {
            learning_rate: t.learning_rate.unwrap_or(default.learning_rate),
            momentum: t.momentum.unwrap_or(default.momentum),
            steps: t.steps.unwrap_or(default.steps),
            batch_size: t.batch_size.unwrap_or(default.batch_size),
            probe_every: t.probe_every.unwrap_or(default.probe_every),
            init_scale: t.init_scale.unwrap_or(default.init_scale),
            seed: t.seed.unwrap_or(self.seed.wrapping_add(2)),
            beta: default.beta,
        }
    }
}

/// Abscissae in [1, 2) so an unbiased first layer stays linear on the data.
pub fn spline_points(n: usize, seed: u64) -> duality_nets_core::Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|_| 1.0 + rng.random::<f64>()).collect();
    let ys: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Dataset::one_dimensional(&xs, &ys)
}

/// Order-preserving parallel map on the current rayon pool.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.par_iter().map(f).collect()
}

pub fn params_json(p: &NetworkParams) -> Value {
    let mat = |m: &ndarray::Array2<f64>| -> Value { m.rows().into_iter().map(|r| r.to_vec()).collect() };
    let vecs = |v: &Option<Vec<ndarray::Array1<f64>>>| -> Value {
        v.as_ref().map_or(Value::Null, |v| v.iter().map(|a| a.to_vec()).collect())
    };
    json!({
        "weights": p.weights.iter().map(|b| b.iter().map(mat).collect::<Vec<_>>()).collect::<Vec<_>>(),
        "head": p.head.iter().map(mat).collect::<Vec<_>>(),
        "biases": vecs(&p.biases),
        "bn_scale": vecs(&p.bn_scale),
        "bn_shift": vecs(&p.bn_shift),
        "branch_norms": p.branch_norms,
    })
}

pub fn run(ctx: &Ctx) -> RunResult<Outcome> {
    match ctx.cfg.experiment {
        Experiment::Fig1Spline => spline::fig1(ctx),
        Experiment::Fig2RankVsBeta => linear::fig2(ctx),
        Experiment::Fig3Norms => linear::fig3(ctx),
        Experiment::Fig6Projections => linear::fig6(ctx),
        Experiment::Fig3bReluRank => relu::fig3b(ctx),
        Experiment::Fig4Whitened => relu::fig4(ctx),
        Experiment::NeuralCollapse => certify::neural_collapse(ctx),
        Experiment::VerifySuite => certify::verify_suite(ctx),
        Experiment::Construct => certify::construct(ctx),
        Experiment::Train => training::train(ctx),
    }
}
