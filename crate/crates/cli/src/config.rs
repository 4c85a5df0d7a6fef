use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Fig1Spline,
    Fig2RankVsBeta,
    Fig3Norms,
    Fig3bReluRank,
    Fig4Whitened,
    Fig6Projections,
    NeuralCollapse,
    VerifySuite,
    Construct,
    Train,
}

impl Experiment {
    pub const ALL: [Experiment; 10] = [
        Experiment::Fig1Spline,
        Experiment::Fig2RankVsBeta,
        Experiment::Fig3Norms,
        Experiment::Fig3bReluRank,
        Experiment::Fig4Whitened,
        Experiment::Fig6Projections,
        Experiment::NeuralCollapse,
        Experiment::VerifySuite,
        Experiment::Construct,
        Experiment::Train,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Fig1Spline => "fig1_spline",
            Experiment::Fig2RankVsBeta => "fig2_rank_vs_beta",
            Experiment::Fig3Norms => "fig3_norms",
            Experiment::Fig3bReluRank => "fig3b_relu_rank",
            Experiment::Fig4Whitened => "fig4_whitened",
            Experiment::Fig6Projections => "fig6_projections",
            Experiment::NeuralCollapse => "neural_collapse",
            Experiment::VerifySuite => "verify_suite",
            Experiment::Construct => "construct",
            Experiment::Train => "train",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Experiment::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| {
            let names: Vec<_> = Experiment::ALL.iter().map(|e| e.name()).collect();
            format!("unknown experiment {s:?}, expected one of {}", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Gaussian,
    RankOne,
    Teacher,
    /// Random 1-D points: abscissae in [1, 2), standard normal labels.
    Spline,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub generator: Option<Generator>,
    pub csv: Option<PathBuf>,
    pub n: Option<usize>,
    pub d: Option<usize>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub whiten: Option<bool>,
    pub positive_c: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationName {
    Linear,
    Relu,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub depth: Option<usize>,
    pub branches: Option<usize>,
    pub widths: Option<Vec<usize>>,
    pub activation: Option<ActivationName>,
    pub bias: Option<bool>,
    pub batch_norm: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub probe_every: Option<usize>,
    pub init_scale: Option<f64>,
    pub init_seed: Option<u64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Linear,
    Geometric,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaSweep {
    pub from: Option<f64>,
    pub to: Option<f64>,
    pub points: Option<usize>,
    pub spacing: Option<Spacing>,
    /// Explicit values; excludes the range fields.
    pub values: Option<Vec<f64>>,
}

impl BetaSweep {
    pub fn values(&self, from: f64, to: f64, points: usize) -> Vec<f64> {
        if let Some(v) = &self.values {
            return v.clone();
        }
        let (a, b) = (self.from.unwrap_or(from), self.to.unwrap_or(to));
        let m = self.points.unwrap_or(points);
        if m == 1 {
            return vec![a];
        }
        let frac = |i: usize| i as f64 / (m - 1) as f64;
        match self.spacing.unwrap_or(Spacing::Geometric) {
            Spacing::Linear => (0..m).map(|i| a + (b - a) * frac(i)).collect(),
            Spacing::Geometric => (0..m).map(|i| a * (b / a).powf(frac(i))).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    TwoLayerLinear,
    DeepLinear,
    WhitenedRelu,
    RankOneRelu,
    BnHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub arch: Option<ArchConfig>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub beta_sweep: Option<BetaSweep>,
    #[serde(default)]
    pub depths: Option<Vec<usize>>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub construction: Option<Construction>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{pointer}: {message}")]
pub struct ConfigError {
    /// JSON pointer to the offending value; empty for the document root.
    pub pointer: String,
    pub message: String,
}

impl ConfigError {
    pub fn at(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError { pointer: pointer.into(), message: message.into() }
    }
}

fn escape_token(t: &str) -> String {
    t.replace('~', "~0").replace('/', "~1")
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{}", escape_token(key))),
            Segment::Enum { variant } => out.push_str(&format!("/{}", escape_token(variant))),
            Segment::Unknown => {}
        }
    }
    out
}

impl ExperimentConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        ExperimentConfig {
            experiment,
            seed: None,
            dataset: None,
            arch: None,
            train: None,
            beta: None,
            beta_sweep: None,
            depths: None,
            seeds: None,
            construction: None,
            out: None,
        }
    }

    /// Parses and validates a JSON document. Relative paths inside it are
    /// resolved against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = pointer_of(e.path());
            let inner = e.into_inner();
            // Strip serde's trailing position, the pointer already says where.
            let msg = inner.to_string();
            let msg = msg.split(" at line ").next().unwrap_or(&msg).to_string();
            ConfigError::at(pointer, msg)
        })?;
        if let Some(csv) = cfg.dataset.as_mut().and_then(|d| d.csv.as_mut()) {
            if csv.is_relative() {
                *csv = base.join(&*csv);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::at("", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |v: Option<usize>, ptr: &str| match v {
            Some(0) => Err(ConfigError::at(ptr, "must be at least 1")),
            _ => Ok(()),
        };
        let finite_pos = |v: Option<f64>, ptr: &str| match v {
            Some(x) if !(x > 0.0 && x.is_finite()) => Err(ConfigError::at(ptr, format!("must be positive and finite, got {x}"))),
            _ => Ok(()),
        };
        if let Some(d) = &self.dataset {
            match (&d.generator, &d.csv) {
                (Some(_), Some(_)) => return Err(ConfigError::at("/dataset", "give either generator or csv, not both")),
                (_, Some(p)) if !p.is_file() => {
                    return Err(ConfigError::at("/dataset/csv", format!("file {} does not exist", p.display())))
                }
                _ => {}
            }
            if d.csv.is_some() {
                for (field, set) in [("n", d.n.is_some()), ("d", d.d.is_some()), ("k", d.k.is_some()), ("positive_c", d.positive_c.is_some())] {
                    if set {
                        return Err(ConfigError::at(format!("/dataset/{field}"), "only applies to generated data"));
                    }
                }
            }
            positive(d.n, "/dataset/n")?;
            positive(d.d, "/dataset/d")?;
            positive(d.k, "/dataset/k")?;
            if d.positive_c.is_some() && d.generator.is_some_and(|g| g != Generator::RankOne) {
                return Err(ConfigError::at("/dataset/positive_c", "only applies to the rank_one generator"));
            }
            if d.generator == Some(Generator::Spline) && (d.d.is_some_and(|v| v != 1) || d.k.is_some_and(|v| v != 1)) {
                return Err(ConfigError::at("/dataset", "spline data is one-dimensional with one output"));
            }
        }
        if let Some(a) = &self.arch {
            if let Some(depth) = a.depth {
                if depth < 2 {
                    return Err(ConfigError::at("/arch/depth", "must be at least 2"));
                }
                if let Some(w) = &a.widths {
                    if w.len() != depth - 1 {
                        return Err(ConfigError::at("/arch/widths", format!("needs {} entries for depth {depth}", depth - 1)));
                    }
                }
            }
            positive(a.branches, "/arch/branches")?;
            if let Some(w) = &a.widths {
                if w.is_empty() {
                    return Err(ConfigError::at("/arch/widths", "must not be empty"));
                }
                if let Some(i) = w.iter().position(|&v| v == 0) {
                    return Err(ConfigError::at(format!("/arch/widths/{i}"), "must be at least 1"));
                }
            }
            if a.batch_norm == Some(true) && a.activation == Some(ActivationName::Linear) {
                return Err(ConfigError::at("/arch/batch_norm", "batch norm requires relu activation"));
            }
        }
        if let Some(t) = &self.train {
            finite_pos(t.learning_rate, "/train/learning_rate")?;
            finite_pos(t.init_scale, "/train/init_scale")?;
            positive(t.steps, "/train/steps")?;
            if let Some(m) = t.momentum {
                if !(0.0..1.0).contains(&m) {
                    return Err(ConfigError::at("/train/momentum", format!("must lie in [0, 1), got {m}")));
                }
            }
        }
        if let Some(b) = self.beta {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(ConfigError::at("/beta", format!("must be finite and >= 0, got {b}")));
            }
        }
        if let Some(s) = &self.beta_sweep {
            if self.beta.is_some() {
                return Err(ConfigError::at("/beta_sweep", "give either beta or beta_sweep, not both"));
            }
            if let Some(v) = &s.values {
                if s.from.is_some() || s.to.is_some() || s.points.is_some() || s.spacing.is_some() {
                    return Err(ConfigError::at("/beta_sweep/values", "explicit values exclude from, to, points and spacing"));
                }
                if v.is_empty() {
                    return Err(ConfigError::at("/beta_sweep/values", "must not be empty"));
                }
                if let Some(i) = v.iter().position(|b| !(*b >= 0.0 && b.is_finite())) {
                    return Err(ConfigError::at(format!("/beta_sweep/values/{i}"), "must be finite and >= 0"));
                }
                if let Some(i) = v.windows(2).position(|w| w[1] <= w[0]) {
                    return Err(ConfigError::at(format!("/beta_sweep/values/{}", i + 1), "values must be strictly increasing"));
                }
            }
            positive(s.points, "/beta_sweep/points")?;
            let geometric = s.spacing.unwrap_or(Spacing::Geometric) == Spacing::Geometric;
            for (field, v) in [("from", s.from), ("to", s.to)] {
                match v {
                    Some(x) if geometric && !(x > 0.0 && x.is_finite()) => {
                        return Err(ConfigError::at(format!("/beta_sweep/{field}"), "geometric spacing needs a positive value"))
                    }
                    Some(x) if !(x >= 0.0 && x.is_finite()) => {
                        return Err(ConfigError::at(format!("/beta_sweep/{field}"), "must be finite and >= 0"))
                    }
                    _ => {}
                }
            }
            if let (Some(a), Some(b)) = (s.from, s.to) {
                if b <= a {
                    return Err(ConfigError::at("/beta_sweep/to", "must exceed from"));
                }
            }
        }
        if let Some(d) = &self.depths {
            if d.is_empty() {
                return Err(ConfigError::at("/depths", "must not be empty"));
            }
            if let Some(i) = d.iter().position(|&v| v < 2) {
                return Err(ConfigError::at(format!("/depths/{i}"), "depth must be at least 2"));
            }
        }
        if let Some(s) = &self.seeds {
            if s.is_empty() {
                return Err(ConfigError::at("/seeds", "must not be empty"));
            }
        }
        self.validate_for_experiment()
    }

    fn validate_for_experiment(&self) -> Result<(), ConfigError> {
        use Experiment::*;
        let generator = self.dataset.as_ref().and_then(|d| d.generator);
        let csv = self.dataset.as_ref().is_some_and(|d| d.csv.is_some());
        let reject = |set: bool, ptr: &str| {
            if set {
                Err(ConfigError::at(ptr, format!("not used by {}", self.experiment)))
            } else {
                Ok(())
            }
        };
        match self.experiment {
            Fig1Spline => {
                if csv || generator.is_some_and(|g| g != Generator::Spline) {
                    return Err(ConfigError::at("/dataset", "fig1_spline only uses the spline generator"));
                }
                reject(self.beta_sweep.is_some(), "/beta_sweep")?;
                reject(self.construction.is_some(), "/construction")?;
            }
            Fig2RankVsBeta | Fig6Projections => {
                reject(self.depths.is_some(), "/depths")?;
                reject(self.construction.is_some(), "/construction")?;
                if self.experiment == Fig6Projections {
                    reject(self.beta_sweep.is_some(), "/beta_sweep")?;
                }
            }
            Fig3Norms | Fig3bReluRank | Train => {
                reject(self.beta_sweep.is_some(), "/beta_sweep")?;
                reject(self.depths.is_some(), "/depths")?;
                reject(self.construction.is_some(), "/construction")?;
            }
            Fig4Whitened => {
                reject(self.beta_sweep.is_some(), "/beta_sweep")?;
                reject(self.construction.is_some(), "/construction")?;
                if generator.is_some_and(|g| g != Generator::Gaussian) {
                    return Err(ConfigError::at("/dataset/generator", "fig4_whitened needs class-labelled data (gaussian or csv)"));
                }
            }
            NeuralCollapse | VerifySuite => {
                reject(self.arch.is_some(), "/arch")?;
                reject(self.train.is_some(), "/train")?;
                reject(self.beta_sweep.is_some(), "/beta_sweep")?;
                reject(self.construction.is_some(), "/construction")?;
                reject(csv, "/dataset/csv")?;
            }
            Construct => {
                reject(self.beta_sweep.is_some(), "/beta_sweep")?;
                reject(self.train.is_some(), "/train")?;
                if self.construction.is_none() {
                    return Err(ConfigError::at("/construction", "construct needs a construction"));
                }
            }
        }
        if self.experiment == Fig3Norms && self.arch.as_ref().is_some_and(|a| a.activation == Some(ActivationName::Relu)) {
            return Err(ConfigError::at("/arch/activation", "fig3_norms trains a linear network"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        ExperimentConfig::from_json(text, Path::new("."))
    }

    #[test]
    fn pointers_follow_the_document() {
        let e = parse(r#"{"experiment":"train","arch":{"widths":[3,"x"]}}"#).unwrap_err();
        assert_eq!(e.pointer, "/arch/widths/1");
        let e = parse(r#"{"experiment":"train","train":{"momentum":1.5}}"#).unwrap_err();
        assert_eq!(e.pointer, "/train/momentum");
        let e = parse(r#"{"experiment":"nope"}"#).unwrap_err();
        assert_eq!(e.pointer, "/experiment");
    }

    #[test]
    fn sweep_spacing() {
        let s = BetaSweep { from: None, to: None, points: None, spacing: Some(Spacing::Linear), values: None };
        assert_eq!(s.values(1.0, 3.0, 3), vec![1.0, 2.0, 3.0]);
        let g = BetaSweep { spacing: None, ..s };
        let v = g.values(1.0, 100.0, 3);
        assert!((v[1] - 10.0).abs() < 1e-12);
    }
}
