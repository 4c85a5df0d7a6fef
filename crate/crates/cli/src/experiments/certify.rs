use duality_nets_core::closedform::{
    bn_head, deep_linear, deep_relu_rank_one, deep_relu_whitened, rank_one_arch, two_layer_linear, two_layer_linear_arch,
    whitened_arch,
};
use duality_nets_core::data::{generate, whiten, GeneratorKind, GeneratorSpec};
use duality_nets_core::duality::{
    certify, dual_feasibility, duality_gap, inner_radius, nonneg_sphere_max_brute, nonneg_sphere_max_disjoint,
    optimal_dual_for, rank_one_extreme, rank_one_extreme_brute, FEASIBILITY_SLACK,
};
use duality_nets_core::forward::{forward_with_inputs, predict};
use duality_nets_core::linalg::{max_abs, spectral_norm};
use duality_nets_core::probes::{combined_spectra, neural_collapse_check};
use duality_nets_core::train::init_params;
use duality_nets_core::{Activation, Architecture, Dataset, Error, NetworkParams};
use ndarray::{concatenate, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{par_map, params_json, Ctx, DataDefaults, Outcome, RunResult};
use crate::config::{ConfigError, Construction, Generator};
use crate::plot::{Chart, Series};
use crate::report::{Assertion, Relation};

fn normal(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.sample(StandardNormal))
}

pub fn neural_collapse(ctx: &Ctx) -> RunResult<Outcome> {
    let d = ctx.cfg.dataset.clone().unwrap_or_default();
    let cases = match (d.n, d.k) {
        (None, None) => vec![(4, 2), (12, 3), (60, 10)],
        (n, k) => vec![(n.unwrap_or(12), k.unwrap_or(3))],
    };
    let beta = ctx.beta_or(0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.data_seed());
    let mut out = Outcome::new(Chart::new("Distance to the simplex frame", "n", "deviation").log_x().log_y());
    let mut series = [vec![], vec![], vec![]];
    for (n, k) in cases {
        if k < 2 || n % k != 0 {
            return Err(ConfigError::at("/dataset/n", format!("n = {n} must be a multiple of k = {k} >= 2")).into());
        }
        let ds = generate(&GeneratorSpec::new(GeneratorKind::Gaussian, n, d.d.unwrap_or(3), k, rng.random()))?;
        let feats = normal(&mut rng, n, n + 5);
        let (p, arch) = bn_head(std::slice::from_ref(&feats), &ds, beta)?;
        let trace = forward_with_inputs(&p, &arch, &vec![feats.view(); k])?;
        let acts: Vec<_> = trace.last_hidden().into_iter().map(|a| a.view()).collect();
        let a = concatenate(Axis(1), &acts).expect("equal row counts");
        let centered = &a - &a.mean_axis(Axis(0)).expect("rows").insert_axis(Axis(0));
        let scale = (k as f64 / n as f64).sqrt();
        let target = Array2::from_shape_fn((n, k), |(i, j)| scale * (if i / (n / k) == j { 1.0 } else { 0.0 } - 1.0 / k as f64));
        let dev = max_abs(&(&centered - &target));
        let class_index = ds.class_index().expect("one-hot data");
        let (dist, etf) = neural_collapse_check(&a, &class_index)?;
        let alpha_err = (etf.scale_alpha - ((k as f64 - 1.0) / n as f64).sqrt()).abs();
        let x = n as f64;
        for (i, (name, v)) in [("activation_deviation", dev), ("etf_distance", dist), ("alpha_error", alpha_err)].into_iter().enumerate() {
            out.row(x, name, v);
            out.metric(format!("{name}_n{n}_k{k}"), v);
            out.check(Assertion::at_most(format!("(n={n}, K={k}) {}", name.replace('_', " ")), v, 1e-10));
            series[i].push((x, v.max(1e-18)));
        }
    }
    for (name, pts) in ["activation deviation", "ETF distance", "alpha error"].into_iter().zip(series) {
        out.chart.push(Series::scatter(name, pts));
    }
    Ok(out)
}

fn whitened_classes(n: usize, d: usize, k: usize, seed: u64) -> RunResult<Dataset> {
    Ok(whiten(&generate(&GeneratorSpec::new(GeneratorKind::Gaussian, n, d, k, seed))?)?)
}

const SETTINGS: [&str; 8] = [
    "two-layer linear K=1",
    "two-layer linear K=3",
    "deep linear L=3",
    "deep linear L=4",
    "whitened relu L=2",
    "whitened relu L=3",
    "whitened relu L=4",
    "batch-norm head",
];

/// Relative duality gap of the closed form for one random instance.
fn strong_instance(setting: usize, seed: u64) -> RunResult<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cert = match setting {
        0..=3 => {
            let k = if setting == 0 { 1 } else { 3 };
            let depth = [2, 2, 3, 4][setting];
            let ds = Dataset::new(normal(&mut rng, 8, 5), normal(&mut rng, 8, k))?;
            let beta = rng.random_range(0.05..1.2) * spectral_norm(&ds.x.t().dot(&ds.labels));
            let (p, arch) = if depth == 2 {
                (two_layer_linear(&ds, beta)?, two_layer_linear_arch(&ds))
            } else {
                let arch = Architecture::chain(depth, k, 5, k + 1, Activation::Linear, k)?;
                (deep_linear(&ds, beta, &arch)?, arch)
            };
            duality_gap(&p, &arch, &ds, beta)?
        }
        4..=6 => {
            let ds = whitened_classes(6, 10, 3, rng.random())?;
            let beta = rng.random_range(0.01..2.0);
            let arch = whitened_arch(&ds, setting - 2, 3)?;
            duality_gap(&deep_relu_whitened(&ds, beta, &arch)?, &arch, &ds, beta)?
        }
        _ => {
            let ds = generate(&GeneratorSpec::new(GeneratorKind::Gaussian, 9, 4, 3, rng.random()))?;
            let feats = normal(&mut rng, 9, 12);
            let beta = rng.random_range(0.01..2.0);
            let (p, arch) = bn_head(std::slice::from_ref(&feats), &ds, beta)?;
            duality_gap(&p, &arch, &Dataset::new(feats, ds.labels.clone())?, beta)?
        }
    };
    Ok(if cert.feasible() { cert.relative_gap().unwrap_or(f64::INFINITY) } else { f64::INFINITY })
}

/// Gap between a random primal point and a random feasible dual point.
fn weak_instance(seed: u64) -> RunResult<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = rng.random_range(0.05..2.0);
    let depth = rng.random_range(2..=4);
    let (ds, arch) = match seed % 4 {
        0 => (Dataset::new(normal(&mut rng, 6, 4), normal(&mut rng, 6, 2))?, Architecture::chain(depth, 2, 4, 3, Activation::Linear, 2)?),
        1 => (whitened_classes(6, 9, 3, rng.random())?, Architecture::chain(depth, 2, 9, 3, Activation::Relu, 3)?),
        2 => {
            let c = Array1::from_shape_fn(7, |_| rng.random_range(0.0..2.0));
            let a0 = Array1::from_shape_fn(3, |_| rng.sample(StandardNormal));
            let ds = Dataset::from_rank_one(c, a0, normal(&mut rng, 7, 2))?;
            let arch = Architecture::chain(depth, 2, 3, 3, Activation::Relu, 2)?;
            (ds, if rng.random_bool(0.5) { arch.with_bias() } else { arch })
        }
        _ => (
            Dataset::new(normal(&mut rng, 6, 4), normal(&mut rng, 6, 2))?,
            Architecture::chain(depth, 2, 4, 3, Activation::Relu, 2)?.with_batch_norm()?,
        ),
    };
    // Random batch-norm nets can feed a constant column into the normalization.
    let p = loop {
        let p = init_params(&arch, rng.random_range(0.2..2.0), rng.random())?;
        if predict(&p, &arch, &ds.x).is_ok() {
            break p;
        }
    };
    let t = inner_radius(&p, &arch);
    let lambda = match optimal_dual_for(&arch, &ds, beta, t) {
        Ok(opt) if seed % 8 >= 4 => opt.lambda,
        _ => {
            let mut l = normal(&mut rng, ds.n(), ds.k());
            if arch.last_hidden_bias {
                let mean = l.mean_axis(Axis(0)).expect("rows");
                l -= &mean.insert_axis(Axis(0));
            }
            let w = dual_feasibility(&l, &ds, &arch, t)?;
            l * (rng.random_range(0.0..1.0) * beta / w)
        }
    };
    let c = certify(&p, &arch, &ds, beta, lambda)?;
    Ok(if c.feasible() { c.gap.unwrap_or(f64::NEG_INFINITY) } else { f64::NEG_INFINITY })
}

/// Largest relative error of the analytic extreme values against enumeration.
fn brute_instance(seed: u64) -> RunResult<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=10);
    let c = Array1::from_shape_fn(n, |_| rng.sample(StandardNormal));
    let radius = rng.random_range(0.5..2.0);
    let l = normal(&mut rng, n, 2);
    let centered = &l - &l.mean_axis(Axis(0)).expect("rows").insert_axis(Axis(0));
    let mut worst = 0.0_f64;
    for (lam, bias) in [(&l, false), (&centered, true)] {
        let a = rank_one_extreme(lam, &c, radius, bias);
        let b = rank_one_extreme_brute(lam, &c, radius, bias)?;
        worst = worst.max((a - b).abs() / (1.0 + a.abs()));
    }
    let mut disjoint = Array2::zeros((n, 2));
    for i in 0..n {
        disjoint[[i, i % 2]] = rng.sample::<f64, _>(StandardNormal);
    }
    let a = nonneg_sphere_max_disjoint(&disjoint);
    let b = nonneg_sphere_max_brute(&disjoint)?;
    Ok(worst.max((a - b).abs() / (1.0 + a.abs())))
}

pub fn verify_suite(ctx: &Ctx) -> RunResult<Outcome> {
    let base = ctx.data_seed();
    let seeds = ctx.seeds_or(&(0..10).map(|i| base.wrapping_add(i)).collect::<Vec<_>>());
    let jobs: Vec<(usize, u64)> = (0..SETTINGS.len()).flat_map(|s| seeds.iter().map(move |&seed| (s, seed))).collect();
    let strong = par_map(&jobs, |&(s, seed)| strong_instance(s, seed)).into_iter().collect::<RunResult<Vec<_>>>()?;
    let weak = par_map(&seeds, |&seed| weak_instance(seed)).into_iter().collect::<RunResult<Vec<_>>>()?;
    let brute = par_map(&seeds, |&seed| brute_instance(seed)).into_iter().collect::<RunResult<Vec<_>>>()?;

    let mut out = Outcome::new(Chart::new("Relative duality gap of closed forms", "instance", "gap").log_y());
    for (s, name) in SETTINGS.iter().enumerate() {
        let gaps: Vec<f64> = jobs.iter().zip(&strong).filter(|((js, _), _)| *js == s).map(|(_, g)| *g).collect();
        let key = name.replace([' ', '='], "_").replace("__", "_");
        for (i, g) in gaps.iter().enumerate() {
            out.row(i as f64, format!("gap_{key}"), *g);
        }
        let worst = gaps.iter().copied().fold(0.0, f64::max);
        out.metric(format!("max_gap_{key}"), worst);
        out.check(Assertion::at_most(format!("strong duality, {name}"), worst, 1e-8));
        out.chart.push(Series::scatter(*name, gaps.iter().enumerate().map(|(i, g)| (i as f64, g.max(1e-18))).collect()));
    }
    for (i, (w, b)) in weak.iter().zip(&brute).enumerate() {
        out.row(i as f64, "weak_gap", *w);
        out.row(i as f64, "brute_force_error", *b);
    }
    let min_weak = weak.iter().copied().fold(f64::INFINITY, f64::min);
    let worst_brute = brute.iter().copied().fold(0.0, f64::max);
    out.metric("min_weak_gap", min_weak);
    out.metric("max_brute_force_error", worst_brute);
    out.check(Assertion::at_least("weak duality", min_weak, -1e-9));
    out.check(Assertion::at_most("analytic extreme values match enumeration", worst_brute, 1e-9));
    Ok(out)
}

pub fn construct(ctx: &Ctx) -> RunResult<Outcome> {
    let kind = ctx.cfg.construction.expect("validated");
    let depth = ctx.cfg.arch.as_ref().and_then(|a| a.depth);
    let bias = ctx.cfg.arch.as_ref().and_then(|a| a.bias).unwrap_or(false);
    let ds = ctx.dataset(match kind {
        Construction::TwoLayerLinear | Construction::DeepLinear => DataDefaults::new(Generator::Teacher, 8, 5, 3),
        Construction::WhitenedRelu => DataDefaults::new(Generator::Gaussian, 6, 10, 3).whitened(),
        Construction::RankOneRelu => DataDefaults { positive_c: true, ..DataDefaults::new(Generator::RankOne, 6, 3, 1) },
        Construction::BnHead => DataDefaults::new(Generator::Gaussian, 9, 12, 3),
    })?;
    let beta = ctx.beta_or(match kind {
        Construction::TwoLayerLinear | Construction::DeepLinear => 0.3 * spectral_norm(&ds.x.t().dot(&ds.labels)),
        // The biased rank-one construction is the min-norm interpolant.
        Construction::RankOneRelu if bias => 0.0,
        Construction::RankOneRelu => 0.1,
        _ => 0.3,
    });
    let (p, arch): (NetworkParams, Architecture) = match kind {
        Construction::TwoLayerLinear => (two_layer_linear(&ds, beta)?, two_layer_linear_arch(&ds)),
        Construction::DeepLinear => {
            let arch = ctx.arch(&ds, Architecture::chain(3, ds.k(), ds.d(), ds.k() + 1, Activation::Linear, ds.k())?)?;
            (deep_linear(&ds, beta, &arch)?, arch)
        }
        Construction::WhitenedRelu => {
            let arch = whitened_arch(&ds, depth.unwrap_or(3), ctx.width_or(ds.k()))?;
            (deep_relu_whitened(&ds, beta, &arch)?, arch)
        }
        Construction::RankOneRelu => {
            let arch = rank_one_arch(&ds, depth.unwrap_or(3), bias, ctx.width_or(4))?;
            (deep_relu_rank_one(&ds, &arch, beta)?, arch)
        }
        Construction::BnHead => bn_head(std::slice::from_ref(&ds.x), &ds, beta)?,
    };
    let mut out = Outcome::new(Chart::new("Singular values of the constructed layers", "index", "singular value").log_y());
    for (l, sigma) in combined_spectra(&p, &arch)?.iter().enumerate() {
        for (i, s) in sigma.iter().enumerate() {
            out.row(i as f64 + 1.0, format!("sigma_layer{}", l + 1), *s);
        }
        out.chart.push(Series::scatter(format!("layer {}", l + 1), sigma.iter().enumerate().map(|(i, &s)| (i as f64 + 1.0, s)).collect()));
    }
    out.metric("beta", beta);
    out.files.push(("params.json".into(), params_json(&p)));
    let cert = match duality_gap(&p, &arch, &ds, beta) {
        Err(Error::NoDualConstruction(_)) => {
            // No certificate exists here; the minimum-norm interpolant must still fit.
            let fit = max_abs(&(predict(&p, &arch, &ds.x)? - &ds.labels));
            out.metric("interpolation_error", fit);
            out.check(Assertion::at_most("interpolation error", fit, 1e-8));
            return Ok(out);
        }
        other => other?,
    };
    let primal = cert.primal_value.unwrap_or(f64::NAN);
    let rel = cert.relative_gap().unwrap_or(f64::INFINITY);
    out.row(beta, "primal", primal);
    out.row(beta, "dual", cert.dual_value);
    out.row(beta, "relative_gap", rel);
    out.metric("primal", primal);
    out.metric("dual", cert.dual_value);
    out.metric("relative_gap", rel);
    out.metric("worst_constraint", cert.worst_constraint);
    out.check(Assertion::new("dual point is feasible", Relation::AtMost, cert.worst_constraint, cert.bound(), cert.bound() * FEASIBILITY_SLACK));
    out.check(Assertion::at_most("relative duality gap", rel, 1e-8));
    out.files.push((
        "certificate.json".into(),
        serde_json::json!({
            "beta": beta,
            "radius": cert.radius,
            "lambda": cert.lambda.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
            "dual_value": cert.dual_value,
            "primal_value": cert.primal_value,
            "worst_constraint": cert.worst_constraint,
            "active_set": cert.active_set,
        }),
    ));
    Ok(out)
}
