//! Closed-form optimal weights, dual certificates and a reference trainer for
//! regularized deep linear, ReLU and batch-normalized branch networks.

pub mod closedform;
pub mod data;
pub mod duality;
pub mod error;
pub mod forward;
pub mod linalg;
pub mod probes;
pub mod rescale;
pub mod train;
pub mod types;

pub use duality::{duality_gap, DualCertificate, DualForm};
pub use error::{Error, Result};
pub use linalg::{pinv, svd, SvdResult, DEFAULT_RANK_TOL};
pub use probes::{EtfSpec, StructureReport};
pub use train::{TrainConfig, Trajectory};
pub use types::{Activation, Architecture, Dataset, NetworkParams};
