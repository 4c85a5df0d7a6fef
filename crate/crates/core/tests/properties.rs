use duality_nets_core::data::whiten;
use duality_nets_core::duality::{certify, dual_feasibility, inner_radius};
use duality_nets_core::linalg::{frobenius, max_abs, pinv, singular_values, svd};
use duality_nets_core::probes::{detect_kinks_weighted, EtfSpec, KINK_GRID, KINK_TOL};
use duality_nets_core::rescale::{balance_two_layer, balance_uniform};
use duality_nets_core::train::init_params;
use duality_nets_core::{Activation, Architecture, Dataset, NetworkParams};
use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(seed: u64, r: usize, c: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((r, c), |_| rng.sample(StandardNormal))
}

fn orthogonality_error(q: &Array2<f64>) -> f64 {
    max_abs(&(q.t().dot(q) - Array2::<f64>::eye(q.ncols())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn svd_reconstructs(seed in any::<u64>(), r in 1usize..=64, c in 1usize..=64, rank in 1usize..=64) {
        // Low-rank products exercise the basis completion.
        let k = rank.min(r).min(c);
        let a = gaussian(seed, r, k).dot(&gaussian(seed ^ 1, k, c));
        let f = svd(&a).unwrap();
        let scale = 1.0 + max_abs(&a);
        prop_assert!(max_abs(&(f.reconstruct() - &a)) <= 1e-10 * scale);
        prop_assert!(orthogonality_error(&f.u) <= 1e-10);
        prop_assert!(orthogonality_error(&f.v) <= 1e-10);
        prop_assert!(f.sigma.windows(2).into_iter().all(|w| w[0] >= w[1] && w[1] >= 0.0));
        let s = singular_values(&a).unwrap();
        prop_assert!((&s - &f.sigma).iter().all(|d| d.abs() <= 1e-10 * scale));
    }

    #[test]
    fn pinv_is_an_involution(seed in any::<u64>(), r in 1usize..=12, c in 1usize..=12) {
        let a = gaussian(seed, r, c);
        let back = pinv(&pinv(&a, 1e-10).unwrap(), 1e-10).unwrap();
        prop_assert!(max_abs(&(back - &a)) <= 1e-8 * (1.0 + max_abs(&a)));
    }

    #[test]
    fn two_layer_balancing_preserves_output(seed in any::<u64>(), d in 1usize..=5, m in 1usize..=6, k in 1usize..=3) {
        let arch = Architecture::new(2, 1, d, vec![m], Activation::Relu, k).unwrap();
        let p = init_params(&arch, 1.5, seed).unwrap();
        let x = gaussian(seed ^ 7, 8, d);
        let (b, report) = balance_two_layer(&p, &arch, &x).unwrap();
        prop_assert!(report.output_preserved());
        prop_assert!(report.objective_after <= report.objective_before + 1e-12);
        let (bb, _) = balance_two_layer(&b, &arch, &x).unwrap();
        let diff = bb.axpy(-1.0, &b);
        prop_assert!(diff.dot(&diff).sqrt() <= 1e-12 * (1.0 + b.dot(&b).sqrt()));
    }

    #[test]
    fn uniform_balancing_is_idempotent(seed in any::<u64>(), depth in 3usize..=5, branches in 1usize..=3) {
        let arch = Architecture::chain(depth, branches, 3, 4, Activation::Relu, 2).unwrap();
        let p = init_params(&arch, 1.0, seed).unwrap();
        let x = gaussian(seed ^ 3, 6, 3);
        let (b, report) = balance_uniform(&p, &arch, &x).unwrap();
        prop_assert!(report.output_preserved());
        prop_assert!(b.squared_norm() <= p.squared_norm() * (1.0 + 1e-12));
        let (bb, _) = balance_uniform(&b, &arch, &x).unwrap();
        let diff = bb.axpy(-1.0, &b);
        prop_assert!(diff.dot(&diff).sqrt() <= 1e-10 * (1.0 + b.dot(&b).sqrt()));
    }

    #[test]
    fn weak_duality(seed in any::<u64>(), depth in 2usize..=4, beta in 0.05f64..2.0, relu in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ds, arch) = if relu {
            let c = Array1::from_shape_fn(6, |_| rng.random_range(0.0..2.0));
            let a0 = Array1::from_shape_fn(3, |_| rng.sample(StandardNormal));
            let ds = Dataset::from_rank_one(c, a0, gaussian(seed ^ 5, 6, 2)).unwrap();
            (ds, Architecture::chain(depth, 2, 3, 3, Activation::Relu, 2).unwrap())
        } else {
            let ds = Dataset::new(gaussian(seed ^ 5, 6, 4), gaussian(seed ^ 6, 6, 2)).unwrap();
            (ds, Architecture::chain(depth, 2, 4, 3, Activation::Linear, 2).unwrap())
        };
        let p = init_params(&arch, rng.random_range(0.2..2.0), seed).unwrap();
        let t = inner_radius(&p, &arch);
        let l = gaussian(seed ^ 9, 6, 2);
        let w = dual_feasibility(&l, &ds, &arch, t).unwrap();
        let lambda = l * (rng.random_range(0.0..1.0) * beta / w);
        let cert = certify(&p, &arch, &ds, beta, lambda).unwrap();
        prop_assert!(cert.feasible());
        prop_assert!(cert.gap.unwrap() >= -1e-9);
    }

    #[test]
    fn etf_gram(p in 2usize..=12, k in 2usize..=12, alpha in 0.1f64..5.0) {
        prop_assume!(k <= p);
        let etf = EtfSpec::standard(p, k, alpha).unwrap();
        let kf = k as f64;
        let gram = etf.columns.t().dot(&etf.columns);
        let want = (Array2::<f64>::eye(k) - Array2::from_elem((k, k), 1.0 / kf)) * (alpha * alpha * kf / (kf - 1.0));
        prop_assert!(max_abs(&(gram - want)) <= 1e-12 * (1.0 + alpha * alpha));
        let col_sum = etf.columns.sum_axis(Axis(1));
        prop_assert!(col_sum.iter().all(|v| v.abs() <= 1e-12 * (1.0 + alpha)));
    }

    #[test]
    fn whitening_is_idempotent(seed in any::<u64>(), n in 1usize..=8, extra in 0usize..=6) {
        let ds = Dataset::new(gaussian(seed, n, n + extra), gaussian(seed ^ 2, n, 2)).unwrap();
        let w = whiten(&ds).unwrap();
        prop_assert!(max_abs(&(w.x.dot(&w.x.t()) - Array2::<f64>::eye(n))) <= 1e-10);
        let ww = whiten(&w).unwrap();
        prop_assert!(max_abs(&(ww.x - &w.x)) <= 1e-10);
    }
}

/// Two-layer ReLU net with one hinge per entry of `hinges`.
fn hinge_net(hinges: &[(f64, f64)]) -> (NetworkParams, Architecture) {
    let arch = Architecture::new(2, 1, 1, vec![hinges.len()], Activation::Relu, 1).unwrap().with_bias();
    let mut p = NetworkParams::zeros(&arch);
    for (i, &(at, jump)) in hinges.iter().enumerate() {
        // Alternate orientation so both sides of a hinge get exercised.
        let dir = if i % 2 == 0 { 1.0 } else { -1.0 };
        p.weights[0][0][[0, i]] = dir;
        p.biases.as_mut().unwrap()[0][i] = -dir * at;
        p.head[0][[i, 0]] = jump;
    }
    (p, arch)
}

#[test]
fn kinks_of_random_piecewise_linear_functions() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..50 {
        let count = rng.random_range(1..=6);
        let mut at: Vec<f64> = Vec::new();
        while at.len() < count {
            let x = rng.random_range(0.0..1.0);
            if at.iter().all(|a: &f64| (a - x).abs() > 0.02) {
                at.push(x);
            }
        }
        let hinges: Vec<(f64, f64)> = at
            .iter()
            .map(|&x| {
                let mag = rng.random_range(0.2..3.0);
                (x, if rng.random_bool(0.5) { mag } else { -mag })
            })
            .collect();
        let (p, arch) = hinge_net(&hinges);
        let kinks = detect_kinks_weighted(&p, &arch, (0.0, 1.0), KINK_GRID, KINK_TOL).unwrap();
        let mut want = hinges.clone();
        want.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert_eq!(kinks.len(), want.len(), "{hinges:?} -> {kinks:?}");
        let h = 1.2 / (KINK_GRID - 1) as f64;
        for (k, (x, jump)) in kinks.iter().zip(&want) {
            assert!((k.x - x).abs() <= h, "kink {} vs {x}", k.x);
            assert!((k.slope_change - jump.abs()).abs() <= 1e-6 * (1.0 + jump.abs()), "{} vs {jump}", k.slope_change);
        }
    }
}

#[test]
fn frobenius_matches_singular_values() {
    let a = gaussian(3, 7, 5);
    let s = singular_values(&a).unwrap();
    assert!((s.dot(&s).sqrt() - frobenius(&a)).abs() < 1e-12);
}
