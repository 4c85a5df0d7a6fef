use duality_nets_core::closedform::{deep_linear, nuclear_regression};
use duality_nets_core::linalg::{frobenius, singular_values, svd};
use duality_nets_core::probes::{numerical_rank, singular_projection};
use duality_nets_core::train::{init_params, run_training};
use duality_nets_core::{Activation, Architecture, NetworkParams, TrainConfig, DEFAULT_RANK_TOL};
use ndarray::s;

use super::{par_map, Ctx, DataDefaults, Outcome, RunResult};
use crate::config::{BetaSweep, ConfigError, Generator};
use crate::plot::{Chart, Series};
use crate::report::Assertion;

fn require_two_layer_linear(arch: &Architecture) -> RunResult<()> {
    if arch.depth != 2 || arch.activation != Activation::Linear || arch.last_hidden_bias {
        return Err(ConfigError::at("/arch", "this experiment needs a two-layer linear network without bias").into());
    }
    Ok(())
}

struct SweepPoint {
    beta: f64,
    rank: usize,
    oracle_err: f64,
    objective: f64,
}

pub fn fig2(ctx: &Ctx) -> RunResult<Outcome> {
    let ds = ctx.dataset(DataDefaults::new(Generator::Teacher, 10, 20, 5).whitened())?;
    let sigma = singular_values(&ds.labels.t().dot(&ds.x))?;
    let s1 = sigma[0];
    let smallest = sigma.iter().copied().filter(|&v| v > 1e-12 * s1).fold(s1, f64::min);
    let arch = ctx.arch(&ds, Architecture::new(2, 1, ds.d(), vec![50], Activation::Linear, ds.k())?)?;
    require_two_layer_linear(&arch)?;

    let (from, to) = (0.6 * smallest, 1.15 * s1);
    let points = ((to / from).ln() / 1.03f64.ln()).ceil() as usize + 1;
    let betas = match &ctx.cfg.beta_sweep {
        Some(sweep) => sweep.values(from, to, points),
        None => match ctx.cfg.beta {
            Some(b) => vec![b],
            None => BetaSweep::default().values(from, to, points),
        },
    };
    let base = ctx.train_config(TrainConfig {
        learning_rate: 0.1 / s1,
        momentum: 0.9,
        steps: 20_000,
        probe_every: 0,
        init_scale: 0.1,
        ..Default::default()
    });
    let init = init_params(&arch, base.init_scale, ctx.init_seed())?;
    let runs = par_map(&betas, |&beta| -> RunResult<SweepPoint> {
        let t = run_training(&init, &arch, &ds, &TrainConfig { beta, ..base.clone() })?;
        let w1 = &t.params.weights[0][0];
        let z = nuclear_regression(&ds.x, &ds.labels, beta)?.z;
        let fit = ds.x.dot(&z);
        let denom = if frobenius(&fit) > 0.0 { frobenius(&fit) } else { frobenius(&ds.labels) };
        let oracle_err = frobenius(&(ds.x.dot(&w1.dot(&t.params.head[0])) - &fit)) / denom;
        Ok(SweepPoint { beta, rank: numerical_rank(w1, DEFAULT_RANK_TOL)?, oracle_err, objective: t.final_objective() })
    });
    let runs = runs.into_iter().collect::<RunResult<Vec<_>>>()?;

    let mut out = Outcome::new(Chart::new("Rank of the first layer", "beta", "rank").log_x());
    for r in &runs {
        out.row(r.beta, "rank", r.rank as f64);
        out.row(r.beta, "oracle_error", r.oracle_err);
        out.row(r.beta, "objective", r.objective);
    }
    for (i, s) in sigma.iter().enumerate() {
        out.metric(format!("sigma_{}", i + 1), *s);
    }
    let increases = runs.windows(2).filter(|w| w[1].rank > w[0].rank).count();
    out.check(Assertion::equal("rank is nonincreasing in beta (violations)", increases as f64, 0.0));
    let (lo, hi) = (betas[0], betas[betas.len() - 1]);
    for (i, &s) in sigma.iter().enumerate().filter(|(_, &s)| s > lo && s < hi) {
        // Geometric midpoint of the last beta with rank > i and the next one.
        let offset = match runs.iter().rposition(|r| r.rank > i) {
            Some(a) if a + 1 < runs.len() => ((runs[a].beta * runs[a + 1].beta).sqrt() - s).abs() / s,
            _ => f64::INFINITY,
        };
        out.metric(format!("transition_offset_{}", i + 1), offset);
        out.check(Assertion::at_most(format!("rank drops below {} near sigma_{}", i + 1, i + 1), offset, 0.05));
    }
    let worst = runs.iter().map(|r| r.oracle_err).fold(0.0, f64::max);
    out.metric("max_oracle_error", worst);
    out.check(Assertion::at_most("trained output matches the soft-threshold oracle", worst, 1e-3));
    out.chart.push(Series::line("trained rank", runs.iter().map(|r| (r.beta, r.rank as f64)).collect()));
    out.chart.push(Series::scatter(
        "singular values of YᵀX",
        sigma.iter().enumerate().map(|(i, &s)| (s, i as f64 + 0.5)).collect(),
    ));
    Ok(out)
}

/// Branches whose end-to-end mass is a visible share of the largest one.
fn active_branches(p: &NetworkParams) -> Vec<usize> {
    let mass: Vec<f64> =
        p.head.iter().zip(&p.weights).map(|(h, ws)| frobenius(h) * ws.iter().map(frobenius).product::<f64>()).collect();
    let top = mass.iter().copied().fold(0.0, f64::max);
    (0..mass.len()).filter(|&j| top > 0.0 && mass[j] > 1e-3 * top).collect()
}

pub fn fig3(ctx: &Ctx) -> RunResult<Outcome> {
    let ds = ctx.dataset(DataDefaults::new(Generator::Teacher, 20, 5, 5))?;
    let arch = ctx.arch(&ds, Architecture::new(4, 10, ds.d(), vec![50, 30, 1], Activation::Linear, ds.k())?)?;
    if arch.depth < 3 || arch.activation != Activation::Linear {
        return Err(ConfigError::at("/arch/depth", "norm alignment needs a linear network with inner layers (depth >= 3)").into());
    }
    let s1 = singular_values(&ds.x.t().dot(&ds.labels))?[0];
    let beta = match ctx.cfg.beta {
        Some(b) => b,
        // Smallest grid beta whose optimum uses two branches.
        None => {
            let mut found = None;
            for i in 1..40 {
                let b = s1 * i as f64 / 40.0;
                if active_branches(&deep_linear(&ds, b, &arch)?).len() == 2 {
                    found = Some(b);
                    break;
                }
            }
            found.ok_or_else(|| ConfigError::at("/beta", "no grid beta gives a two-branch optimum; set beta explicitly"))?
        }
    };
    let cfg = TrainConfig {
        beta,
        ..ctx.train_config(TrainConfig { learning_rate: 2e-3, momentum: 0.9, steps: 20_000, probe_every: 500, ..Default::default() })
    };
    let init = init_params(&arch, cfg.init_scale, ctx.init_seed())?;
    let t = run_training(&init, &arch, &ds, &cfg)?;
    let active = active_branches(&t.params);
    let inner = arch.depth - 2;

    let mut out = Outcome::new(Chart::new("Operator over Frobenius norm of inner layers", "step", "ratio"));
    for snap in &t.snapshots {
        let x = snap.step as f64;
        out.row(x, "objective", snap.objective);
        for &j in &active {
            for l in 0..inner {
                out.row(x, format!("ratio_branch{j}_layer{}", l + 1), snap.report.branch_ratios[j][l]);
            }
        }
    }
    for &j in &active {
        for l in 0..inner {
            let pts = t.snapshots.iter().map(|s| (s.step as f64, s.report.branch_ratios[j][l])).collect();
            out.chart.push(Series::line(format!("branch {j} layer {}", l + 1), pts));
        }
    }
    let last = &t.snapshots.last().expect("final snapshot").report;
    let worst = active.iter().flat_map(|&j| last.branch_ratios[j][..inner].iter().copied()).fold(1.0, f64::min);
    out.metric("beta", beta);
    out.metric("active_branches", active.len() as f64);
    out.metric("worst_inner_ratio", worst);
    out.metric("final_objective", t.final_objective());
    out.check(Assertion::at_least("at least one active branch", active.len() as f64, 1.0));
    out.check(Assertion::at_least("inner layers of active branches are rank one", worst, 0.99));
    Ok(out)
}

pub fn fig6(ctx: &Ctx) -> RunResult<Outcome> {
    let ds = ctx.dataset(DataDefaults::new(Generator::Teacher, 10, 20, 5).whitened())?;
    let arch = ctx.arch(&ds, Architecture::new(2, 1, ds.d(), vec![50], Activation::Linear, ds.k())?)?;
    require_two_layer_linear(&arch)?;
    let f = svd(&ds.labels.t().dot(&ds.x))?;
    let sigma = &f.sigma;
    let default_beta = if sigma.len() >= 3 { (sigma[1] * sigma[2]).sqrt() } else { 0.5 * sigma[sigma.len() - 1] };
    let beta = ctx.beta_or(default_beta);
    let kept = sigma.iter().filter(|&&s| s > beta).count();
    if kept == 0 {
        return Err(ConfigError::at("/beta", format!("beta {beta} is above every singular value, the optimum is zero")).into());
    }
    let directions = f.v.slice(s![.., ..kept]).to_owned();
    let cfg = TrainConfig {
        beta,
        ..ctx.train_config(TrainConfig {
            learning_rate: 0.1 / sigma[0],
            momentum: 0.9,
            steps: 20_000,
            probe_every: 2_000,
            init_scale: 0.1,
            ..Default::default()
        })
    };
    let init = init_params(&arch, cfg.init_scale, ctx.init_seed())?;
    // Full-batch runs are deterministic, so a run of s steps is the prefix of a longer one.
    let every = if cfg.probe_every == 0 { cfg.steps } else { cfg.probe_every };
    let mut checkpoints: Vec<usize> = (0..cfg.steps).step_by(every).collect();
    checkpoints.push(cfg.steps);
    let points = par_map(&checkpoints, |&steps| -> RunResult<(f64, f64)> {
        let p = if steps == 0 { init.clone() } else { run_training(&init, &arch, &ds, &TrainConfig { steps, ..cfg.clone() })?.params };
        let proj = singular_projection(&p.weights[0][0], &directions)?;
        let obj = duality_nets_core::forward::primal_objective(&p, &arch, &ds, beta)?;
        Ok((proj, obj))
    });
    let points = points.into_iter().collect::<RunResult<Vec<_>>>()?;

    let mut out = Outcome::new(Chart::new("First-layer projection onto leading singular directions", "step", "projection"));
    for (&step, &(proj, obj)) in checkpoints.iter().zip(&points) {
        out.row(step as f64, "projection", proj);
        out.row(step as f64, "objective", obj);
    }
    out.chart.push(Series::line("projection", checkpoints.iter().zip(&points).map(|(&s, p)| (s as f64, p.0)).collect()));
    let fin = points.last().expect("final checkpoint").0;
    out.metric("beta", beta);
    out.metric("directions", kept as f64);
    out.metric("final_projection", fin);
    out.check(Assertion::at_least("first-layer columns lie in the leading singular subspace", fin, 0.95));
    Ok(out)
}
