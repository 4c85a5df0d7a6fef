use duality_nets_core::closedform::{deep_relu_whitened_with, whitened_arch, Radius};
use duality_nets_core::forward::primal_objective;
use duality_nets_core::train::{init_params, run_training};
use duality_nets_core::{Activation, Architecture, TrainConfig};

use super::{par_map, Ctx, DataDefaults, Outcome, RunResult};
use crate::config::Generator;
use crate::plot::{Chart, Series};
use crate::report::{Assertion, Relation};

pub fn fig3b(ctx: &Ctx) -> RunResult<Outcome> {
    let ds = ctx.dataset(DataDefaults { positive_c: true, ..DataDefaults::new(Generator::RankOne, 10, 10, 1) })?;
    let arch = ctx.arch(&ds, Architecture::new(5, 1, ds.d(), vec![50, 40, 30, 20], Activation::Relu, ds.k())?.with_bias())?;
    let cfg = TrainConfig {
        beta: ctx.beta_or(0.05),
        ..ctx.train_config(TrainConfig { learning_rate: 1e-2, momentum: 0.9, steps: 20_000, probe_every: 500, ..Default::default() })
    };
    let init = init_params(&arch, cfg.init_scale, ctx.init_seed())?;
    let t = run_training(&init, &arch, &ds, &cfg)?;

    let mut out = Outcome::new(Chart::new("Numerical rank per layer", "step", "rank"));
    let layers = t.snapshots[0].report.ranks.len();
    let name = |l: usize| if l + 1 == layers { "head".to_string() } else { format!("layer {}", l + 1) };
    for snap in &t.snapshots {
        out.row(snap.step as f64, "objective", snap.objective);
        for (l, r) in snap.report.ranks.iter().enumerate() {
            out.row(snap.step as f64, format!("rank_{}", name(l).replace(' ', "")), *r as f64);
        }
    }
    let last = &t.snapshots.last().expect("final snapshot").report;
    for l in 0..layers {
        let pts = t.snapshots.iter().map(|s| (s.step as f64, s.report.ranks[l] as f64)).collect();
        out.chart.push(Series::line(name(l), pts));
        out.check(Assertion::equal(format!("{} has rank one", name(l)), last.ranks[l] as f64, 1.0));
    }
    out.metric("final_objective", t.final_objective());
    Ok(out)
}

pub fn fig4(ctx: &Ctx) -> RunResult<Outcome> {
    let ds = ctx.dataset(DataDefaults::new(Generator::Gaussian, 60, 90, 10).whitened())?;
    let beta = ctx.beta_or(0.1);
    let width = ctx.width_or(50);
    let base = TrainConfig {
        beta,
        ..ctx.train_config(TrainConfig {
            learning_rate: 1e-2,
            momentum: 0.9,
            steps: 10_000,
            batch_size: 20,
            probe_every: 500,
            ..Default::default()
        })
    };
    let depths = ctx.depths_or(&[3, 4, 5]);
    let seeds = ctx.seeds_or(&[1, 2, 3, 4]);
    let mut jobs = Vec::new();
    let mut closed = Vec::new();
    for &depth in &depths {
        let arch = whitened_arch(&ds, depth, width)?;
        let p = deep_relu_whitened_with(&ds, beta, &arch, Radius::Optimal, None)?;
        closed.push(primal_objective(&p, &arch, &ds, beta)?);
        for &seed in &seeds {
            jobs.push((depth, seed, arch.clone()));
        }
    }
    let runs = par_map(&jobs, |(_, seed, arch)| {
        let init = init_params(arch, base.init_scale, 100 + seed)?;
        run_training(&init, arch, &ds, &TrainConfig { seed: *seed, ..base.clone() })
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut out = Outcome::new(Chart::new("Training objective on whitened data", "step", "objective").log_y());
    for (i, &depth) in depths.iter().enumerate() {
        let c = closed[i];
        out.metric(format!("closed_form_L{depth}"), c);
        out.row(0.0, format!("closed_form_L{depth}"), c);
        out.row(base.steps as f64, format!("closed_form_L{depth}"), c);
        out.chart.push(Series::line(format!("closed form L={depth}"), vec![(0.0, c), (base.steps as f64, c)]));
        for ((d, seed, _), t) in jobs.iter().zip(&runs).filter(|((d, _, _), _)| *d == depth) {
            let metric = format!("sgd_L{d}_seed{seed}");
            for s in &t.snapshots {
                out.row(s.step as f64, &metric, s.objective);
            }
            out.chart.push(Series::line(format!("SGD L={d} seed {seed}"), t.snapshots.iter().map(|s| (s.step as f64, s.objective)).collect()));
            out.metric(format!("{metric}_final"), t.final_objective());
            out.check(Assertion::new(
                format!("L={d} closed form at or below SGD seed {seed}"),
                Relation::AtMost,
                c,
                t.final_objective(),
                1e-9,
            ));
        }
    }
    Ok(out)
}
