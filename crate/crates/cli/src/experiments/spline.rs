use duality_nets_core::closedform::{deep_relu_rank_one, rank_one_arch};
use duality_nets_core::forward::predict;
use duality_nets_core::linalg::max_abs;
use duality_nets_core::probes::{detect_kinks, detect_kinks_weighted, KINK_GRID, KINK_TOL};
use duality_nets_core::train::{init_params, run_training};
use duality_nets_core::{Activation, Architecture, Dataset, NetworkParams, TrainConfig};
use ndarray::Array2;

use super::{par_map, Ctx, DataDefaults, Outcome, RunResult};
use crate::config::{ConfigError, Generator};
use crate::plot::{Chart, Series};
use crate::report::Assertion;

const CURVE_POINTS: usize = 300;

fn curve(p: &NetworkParams, arch: &Architecture, lo: f64, hi: f64) -> RunResult<Vec<(f64, f64)>> {
    let pad = 0.1 * (hi - lo);
    let xs: Vec<f64> = (0..CURVE_POINTS).map(|i| lo - pad + (hi - lo + 2.0 * pad) * i as f64 / (CURVE_POINTS - 1) as f64).collect();
    let out = predict(p, arch, &Array2::from_shape_vec((xs.len(), 1), xs.clone()).expect("column"))?;
    Ok(xs.into_iter().zip(out.column(0).iter().copied()).collect())
}

pub fn fig1(ctx: &Ctx) -> RunResult<Outcome> {
    let ds = ctx.dataset(DataDefaults::new(Generator::Spline, 10, 1, 1))?;
    let xs: Vec<f64> = ds.x.column(0).to_vec();
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let half_grid = 0.5 * 1.2 * (hi - lo) / (KINK_GRID - 1) as f64;
    let off_data = |x: f64| xs.iter().map(|d| (d - x).abs()).fold(f64::INFINITY, f64::min);
    let width = ctx.width_or(20);

    let mut out = Outcome::new(Chart::new("Minimum-norm interpolation", "x", "f(x)"));
    for depth in ctx.depths_or(&[2, 3, 4]) {
        let arch = rank_one_arch(&ds, depth, true, width)?;
        let p = deep_relu_rank_one(&ds, &arch, 0.0)?;
        let fit = max_abs(&(predict(&p, &arch, &ds.x)? - &ds.labels));
        let kinks = detect_kinks(&p, &arch, (lo, hi), KINK_GRID, KINK_TOL)?;
        let offset = kinks.iter().map(|&k| off_data(k)).fold(0.0, f64::max);
        let x = depth as f64;
        out.row(x, "fit_error", fit);
        out.row(x, "kink_count", kinks.len() as f64);
        out.row(x, "max_kink_offset", offset);
        for k in &kinks {
            out.row(x, "kink", *k);
        }
        out.metric(format!("fit_error_L{depth}"), fit);
        out.metric(format!("max_kink_offset_L{depth}"), offset);
        out.check(Assertion::at_most(format!("L={depth} interpolation error"), fit, 1e-8));
        out.check(Assertion::at_least(format!("L={depth} has kinks"), kinks.len() as f64, 1.0));
        out.check(Assertion::at_most(format!("L={depth} kinks lie at data abscissae"), offset, half_grid));
        out.chart.push(Series::line(format!("closed form L={depth}"), curve(&p, &arch, lo, hi)?));
    }
    if ctx.cfg.train.is_some() {
        trained(ctx, &ds, (lo, hi), &mut out)?;
    }
    let data: Vec<(f64, f64)> = xs.iter().copied().zip(ds.labels.column(0).iter().copied()).collect();
    out.chart.push(Series::scatter("data", data));
    Ok(out)
}

/// Gradient descent on a three-layer net, best of several initializations.
fn trained(ctx: &Ctx, ds: &Dataset, (lo, hi): (f64, f64), out: &mut Outcome) -> RunResult<()> {
    let depth = ctx.cfg.arch.as_ref().and_then(|a| a.depth).unwrap_or(3);
    let widths = ctx.cfg.arch.as_ref().and_then(|a| a.widths.clone()).unwrap_or_else(|| vec![20; depth - 1]);
    if widths.len() != depth - 1 {
        return Err(ConfigError::at("/arch/widths", format!("needs {} entries", depth - 1)).into());
    }
    let arch = Architecture::new(depth, 1, 1, widths, Activation::Relu, 1)?.with_bias();
    let cfg = TrainConfig {
        beta: ctx.beta_or(1e-5),
        ..ctx.train_config(TrainConfig { learning_rate: 1e-3, momentum: 0.9, steps: 300_000, probe_every: 0, ..Default::default() })
    };
    let runs = par_map(&ctx.seeds_or(&[1, 2, 3, 4]), |&seed| {
        let init = init_params(&arch, cfg.init_scale, seed)?;
        run_training(&init, &arch, ds, &cfg)
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    let best = runs.iter().min_by(|a, b| a.final_objective().total_cmp(&b.final_objective())).expect("seeds are non-empty");
    let fit = max_abs(&(predict(&best.params, &arch, &ds.x)? - &ds.labels));
    let xs = ds.x.column(0);
    let kinks = detect_kinks_weighted(&best.params, &arch, (lo, hi), KINK_GRID, KINK_TOL)?;
    let near_data = |x: f64| xs.iter().any(|d| (d - x).abs() <= 0.02 * (hi - lo));
    let total: f64 = kinks.iter().map(|k| k.slope_change).sum();
    let near: f64 = kinks.iter().filter(|k| near_data(k.x)).map(|k| k.slope_change).sum();
    let share = if total > 0.0 { near / total } else { 0.0 };
    out.row(0.0, "trained_fit_error", fit);
    out.row(0.0, "trained_kink_share_near_data", share);
    out.metric("trained_fit_error", fit);
    out.metric("trained_kink_share_near_data", share);
    out.check(Assertion::at_most("trained net interpolation error", fit, 1e-3));
    out.check(Assertion::at_least("trained net kink mass near data", share, 0.95));
    out.chart.push(Series::line(format!("trained L={depth}"), curve(&best.params, &arch, lo, hi)?));
    Ok(())
}
