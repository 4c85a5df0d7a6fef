use duality_nets_core::train::{init_params, run_training};
use duality_nets_core::{Activation, Architecture, TrainConfig};

use super::{params_json, Ctx, DataDefaults, Outcome, RunResult};
use crate::config::Generator;
use crate::plot::{Chart, Series};
use crate::report::Assertion;

pub fn train(ctx: &Ctx) -> RunResult<Outcome> {
    let ds = ctx.dataset(DataDefaults::new(Generator::Teacher, 20, 5, 2))?;
    let arch = ctx.arch(&ds, Architecture::new(3, 1, ds.d(), vec![16, 16], Activation::Relu, ds.k())?.with_bias())?;
    let cfg = TrainConfig {
        beta: ctx.beta_or(1e-3),
        ..ctx.train_config(TrainConfig { steps: 5_000, probe_every: 100, ..Default::default() })
    };
    let init = init_params(&arch, cfg.init_scale, ctx.init_seed())?;
    let t = run_training(&init, &arch, &ds, &cfg)?;

    let mut out = Outcome::new(Chart::new("Training objective", "step", "objective").log_y());
    for s in &t.snapshots {
        out.row(s.step as f64, "objective", s.objective);
        for (l, r) in s.report.ranks.iter().enumerate() {
            out.row(s.step as f64, format!("rank_layer{}", l + 1), *r as f64);
        }
    }
    out.chart.push(Series::line("full-data objective", t.snapshots.iter().map(|s| (s.step as f64, s.objective)).collect()));
    let every = cfg.probe_every.max(1);
    let batch: Vec<(f64, f64)> =
        t.batch_objectives.iter().enumerate().step_by(every).map(|(i, &v)| (i as f64, v)).collect();
    if cfg.batch_size != 0 {
        out.chart.push(Series::scatter("minibatch objective", batch));
    }
    let first = t.snapshots.first().expect("initial snapshot").objective;
    let last = t.final_objective();
    out.metric("initial_objective", first);
    out.metric("final_objective", last);
    out.check(Assertion::at_most("training does not increase the objective", last, first));
    out.files.push(("params.json".into(), params_json(&t.params)));
    Ok(out)
}
