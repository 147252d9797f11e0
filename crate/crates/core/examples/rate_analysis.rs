//! Fits the limit value, the Łojasiewicz pair and the decay law of a flow.
//!
//! Run with `cargo run --release --example rate_analysis`.

use mflab::analysis::{distance_bound_check, estimate_j_star, ls_fit, rate_fit, TraceSeries};
use mflab::cli::{Experiment, Overrides};
use mflab::flow::run_flow;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/gd-linear-tanh.toml");
    let exp = Experiment::load(config.as_ref(), &Overrides::default())?;
    let cfg = exp.config.flow.flow_config(25);
    let trace = run_flow(&exp.problem, &exp.path0, &cfg)?;
    let series = TraceSeries::from(&trace);
    let tail = exp.config.analysis.tail_fraction;

    let js = estimate_j_star(&series, tail)?;
    println!("J* = {:.12} ({:?} tail model, R² {:.6})", js.value, js.model, js.r2);
    let ls = ls_fit(&series, js.value, exp.config.analysis.gap_floor, tail)?;
    println!("alpha = {:.4} (raw {:.4}), C = {:.4} over tau in {:?}", ls.alpha, ls.alpha_raw, ls.c, ls.tau_window);
    let rate = rate_fit(&series, js.value, &ls, tail)?;
    println!(
        "{:?} branch: fitted rate {:.5}, guaranteed rate {:.5}, R² {:.6}",
        rate.branch, rate.fitted_rate, rate.predicted_rate, rate.r2
    );
    let dist = distance_bound_check(&trace, js.value, &ls)?;
    println!("distance bound on {} snapshots: {} violations", dist.rows.len(), dist.violations);
    for (tau, observed, bound) in dist.rows.iter().step_by(4) {
        println!("  tau {tau:>8.2}: W2 to limit {observed:.3e} <= {bound:.3e}");
    }
    Ok(())
}
