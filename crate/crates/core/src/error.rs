use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("hidden neuron {neuron} of branch {branch} is zero but carries a nonzero head weight")]
    DegenerateNeuron { branch: usize, neuron: usize },
    #[error("branch {branch} has a zero layer ({layer}) but a nonzero head")]
    DegenerateBranch { branch: usize, layer: usize },
    #[error("batch norm input column is constant")]
    ConstantActivation,
    #[error("target is not reachable: {0}")]
    Infeasible(String),
    #[error("layer width {width} is smaller than the {needed} orthogonal directions required")]
    WidthTooSmall { width: usize, needed: usize },
    #[error("duplicate abscissa {0}")]
    DuplicateAbscissa(f64),
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("label column {column} is not in the range of the features (relative residual {residual:.3e})")]
    OverparamAssumptionViolated { column: usize, residual: f64 },
    #[error("brute force over 2^{0} activation patterns refused (limit is 20)")]
    TooLargeForBruteForce(usize),
    #[error("no dual construction for this setting: {0}")]
    NoDualConstruction(String),
    #[error("matrix is zero")]
    ZeroMatrix,
    #[error("classes are not balanced: sizes {0:?}")]
    UnbalancedClasses(Vec<usize>),
    #[error("training diverged at step {step} (objective {objective:e})")]
    Diverged { step: usize, objective: f64 },
    #[error("cannot whiten: {0}")]
    CannotWhiten(String),
    #[error("label {label} is out of range for {k} classes")]
    InvalidLabel { label: usize, k: usize },
    #[error("parse error at row {row}, column {col}: {msg}")]
    ParseError { row: usize, col: usize, msg: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
