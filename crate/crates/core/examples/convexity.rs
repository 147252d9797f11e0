//! Lipschitz ratio of `dJ/dτ` along random generalized geodesics.
//!
//! Run with `cargo run --release --example convexity`.

use mflab::analysis::convexity_probe;
use mflab::cli::{convexity_sweep, Experiment, Overrides};
use mflab::flow::init_path;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/gd-linear-tanh.toml");
    let exp = Experiment::load(config.as_ref(), &Overrides::default())?;
    let m = exp.config.model_m();

    let anchor = |seed| init_path(4, 8, m, 0.5, 1, seed);
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let report = convexity_probe(&exp.problem, &anchor(1)?, &anchor(2)?, &anchor(3)?, &grid)?;
    println!("one geodesic: W² = {:.4}, Lip(h) = {:.4}", report.w2_sq, report.lip_h);
    for (tau, h) in &report.h {
        println!("  h({tau:.1}) = {h:+.5}");
    }

    for seed in [7, 8] {
        let sweep = convexity_sweep(&exp, 100, 11, seed)?;
        println!(
            "seed {seed}: max ratio {:.4}, min curvature estimate {:.4} over {} geodesics",
            sweep.max_ratio, sweep.min_lambda_est, sweep.geodesics
        );
    }
    Ok(())
}
