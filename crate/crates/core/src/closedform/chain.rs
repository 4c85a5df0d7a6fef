//! Per-branch direction chains that the deep constructors thread through the
//! inner layers.

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::types::Architecture;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainMode {
    /// Branch `j` uses `t_j e_j` on every inner layer.
    NonnegOrthogonal,
    /// Seeded random unit vectors.
    UnitArbitrary,
}

/// `dirs[j][l]` is the direction after inner layer `l + 1` of branch `j`
/// (layers 1 .. L−2).
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionChain {
    pub mode: ChainMode,
    pub dirs: Vec<Vec<Array1<f64>>>,
    /// Norm of every direction of a branch.
    pub norms: Vec<f64>,
    /// Directions of different branches on the same layer are orthogonal.
    pub orthogonal: bool,
}

impl DirectionChain {
    pub fn check(&self) -> Result<()> {
        for (j, chain) in self.dirs.iter().enumerate() {
            for d in chain {
                if (norm(d.view()) - self.norms[j]).abs() > 1e-12 * (1.0 + self.norms[j]) {
                    return Err(Error::PreconditionViolated(format!("branch {j}: direction norm differs from {}", self.norms[j])));
                }
                if self.mode == ChainMode::NonnegOrthogonal && d.iter().any(|&v| v < 0.0) {
                    return Err(Error::PreconditionViolated(format!("branch {j}: negative entry in nonnegative chain")));
                }
            }
        }
        if self.orthogonal {
            let layers = self.dirs.first().map_or(0, |c| c.len());
            for l in 0..layers {
                for i in 0..self.dirs.len() {
                    for j in (i + 1)..self.dirs.len() {
                        if self.dirs[i][l].dot(&self.dirs[j][l]).abs() > 1e-12 {
                            return Err(Error::PreconditionViolated(format!("branches {i} and {j} overlap on layer {}", l + 1)));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Same directions rescaled to new per-branch norms.
    pub fn with_norms(&self, t: &[f64]) -> Self {
        let mut out = self.clone();
        for (j, chain) in out.dirs.iter_mut().enumerate() {
            let old = self.norms[j];
            for d in chain.iter_mut() {
                if old > 0.0 {
                    d.mapv_inplace(|v| v / old * t[j]);
                }
            }
        }
        out.norms = t.to_vec();
        out
    }
}

/// Builds a chain for every branch of `arch`.
///
/// Orthogonal mode needs every inner width to be at least the branch count.
/// Arbitrary mode ignores `t` and returns unit directions.
pub fn make_chain(arch: &Architecture, mode: ChainMode, t: &[f64], seed: u64) -> Result<DirectionChain> {
    let inner = arch.depth.saturating_sub(2);
    if t.len() != arch.branches {
        return Err(Error::InvalidInput(format!("expected {} branch norms, got {}", arch.branches, t.len())));
    }
    match mode {
        ChainMode::NonnegOrthogonal => {
            if let Some(&w) = arch.widths[..inner].iter().find(|&&w| w < arch.branches) {
                return Err(Error::WidthTooSmall { width: w, needed: arch.branches });
            }
            if t.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::InvalidInput("branch norms must be >= 0".into()));
            }
            let dirs = (0..arch.branches)
                .map(|j| {
                    (0..inner)
                        .map(|l| {
                            let mut e = Array1::zeros(arch.widths[l]);
                            e[j] = t[j];
                            e
                        })
                        .collect()
                })
                .collect();
            Ok(DirectionChain { mode, dirs, norms: t.to_vec(), orthogonal: true })
        }
        ChainMode::UnitArbitrary => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dirs = (0..arch.branches)
                .map(|_| {
                    (0..inner)
                        .map(|l| loop {
                            let v: Array1<f64> = Array1::from_shape_fn(arch.widths[l], |_| StandardNormal.sample(&mut rng));
                            let n = norm(v.view());
                            if n > 1e-8 {
                                break v / n;
                            }
                        })
                        .collect()
                })
                .collect();
            Ok(DirectionChain { mode, dirs, norms: vec![1.0; arch.branches], orthogonal: false })
        }
    }
}

/// Minimizer of `demand / t^(L−2) + ((L−2)/2) t²`, i.e. `demand^(1/L)`; 1 for zero demand.
pub fn choose_t_star(head_demand: f64, depth: usize) -> f64 {
    if head_demand <= 0.0 || depth < 3 {
        return 1.0;
    }
    head_demand.powf(1.0 / depth as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Activation;

    #[test]
    fn t_star_values() {
        assert!((choose_t_star(2.0, 3) - 2f64.powf(1.0 / 3.0)).abs() < 1e-15);
        assert_eq!(choose_t_star(1.0, 5), 1.0);
        assert_eq!(choose_t_star(0.0, 4), 1.0);
    }

    #[test]
    fn orthogonal_default_basis() {
        let arch = Architecture::new(3, 2, 3, vec![5, 1], Activation::Relu, 2).unwrap();
        let c = make_chain(&arch, ChainMode::NonnegOrthogonal, &[2.0, 3.0], 0).unwrap();
        assert_eq!(c.dirs[0][0][0], 2.0);
        assert_eq!(c.dirs[1][0][1], 3.0);
        c.check().unwrap();
    }

    #[test]
    fn narrow_width_rejected() {
        let arch = Architecture::new(3, 3, 3, vec![2, 1], Activation::Relu, 3).unwrap();
        assert_eq!(
            make_chain(&arch, ChainMode::NonnegOrthogonal, &[1.0; 3], 0).unwrap_err(),
            Error::WidthTooSmall { width: 2, needed: 3 }
        );
    }

    #[test]
    fn arbitrary_seeded() {
        let arch = Architecture::new(4, 2, 3, vec![4, 4, 1], Activation::Linear, 1).unwrap();
        let a = make_chain(&arch, ChainMode::UnitArbitrary, &[1.0; 2], 1).unwrap();
        let b = make_chain(&arch, ChainMode::UnitArbitrary, &[1.0; 2], 2).unwrap();
        a.check().unwrap();
        b.check().unwrap();
        assert_ne!(a, b);
        assert_eq!(a, make_chain(&arch, ChainMode::UnitArbitrary, &[1.0; 2], 1).unwrap());
    }
}
