//! Runs the particle gradient flow on a config and prints the energy balance.
//!
//! Run with `cargo run --release --example gradient_flow [-- config.toml]`.

use std::path::PathBuf;

use mflab::cli::{Experiment, Overrides};
use mflab::flow::{dissipation_check, run_flow};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/gd-linear-tanh.toml")));
    let exp = Experiment::load(&config, &Overrides::default())?;
    let cfg = exp.config.flow.flow_config(0);
    let trace = run_flow(&exp.problem, &exp.path0, &cfg)?;
    println!("{:>10} {:>14} {:>12} {:>10} {:>10}", "tau", "J", "slope", "radius", "dirichlet");
    let stride = (trace.records.len() / 15).max(1);
    for r in trace.records.iter().step_by(stride).chain(std::iter::once(trace.last())) {
        println!("{:>10.3} {:>14.10} {:>12.4e} {:>10.4} {:>10.4}", r.tau, r.j, r.slope, r.support_radius, r.dirichlet);
    }
    let d = dissipation_check(&trace)?;
    println!("stopped: {:?} after {} steps", trace.stop, trace.steps);
    println!(
        "J(0) - J(T) = {:.8}, energy identity {:.8} (mismatch {:.2e}), plain slope integral mismatch {:.2e}",
        d.energy_drop, d.dissipated, d.relative_mismatch, d.slope_sq_mismatch
    );
    Ok(())
}
