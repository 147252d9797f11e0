//! Adjoint Wasserstein gradient against central differences of `J`.
//!
//! Run with `cargo run --release --example gradient_check`.

use mflab::flow::init_path;
use mflab::objective::max_relative_error;
use mflab::{DataMeasure, LossModel, Problem, Result, VectorFieldModel};

fn main() -> Result<()> {
    let data = DataMeasure::uniform(vec![(vec![0.8, -0.2], vec![0.1, 0.6]), (vec![-0.5, 0.4], vec![-0.2, -0.7])])?;
    let loss = LossModel::squared_error(data.radius());
    for model in [VectorFieldModel::linear_tanh(2), VectorFieldModel::gated_tanh(2)] {
        let kind = model.kind();
        let m = model.m();
        let problem = Problem::new(model, loss, data.clone(), 0.1, 8)?;
        let path = init_path(3, 5, m, 0.7, 1, 11)?;
        let (g, report) = problem.wasserstein_gradient(&path)?;
        let fd = problem.finite_difference_gradient(&path, 1e-5)?;
        println!(
            "{kind:?}: J = {:.6}, slope = {:.6}, max relative error vs finite differences {:.2e}",
            report.j,
            report.slope.unwrap(),
            max_relative_error(&g, &fd)
        );
    }
    Ok(())
}
