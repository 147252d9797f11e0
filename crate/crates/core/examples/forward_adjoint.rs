//! Forward RK4 pass, costates, and the fundamental matrix of one sample.
//!
//! Run with `cargo run --example forward_adjoint`.

use mflab::dynamics::{fundamental_matrix, integrate_costate, integrate_forward, push_forward};
use mflab::flow::init_path;
use mflab::{DataMeasure, LossModel, Result, VectorFieldModel};

fn main() -> Result<()> {
    let model = VectorFieldModel::gated_tanh(2);
    let path = init_path(4, 6, model.m(), 0.8, 1, 3)?;
    let data = DataMeasure::uniform(vec![
        (vec![0.5, 0.0], vec![0.0, 0.5]),
        (vec![0.0, -0.5], vec![0.5, 0.0]),
        (vec![-0.3, 0.4], vec![-0.4, -0.3]),
    ])?;
    let loss = LossModel::squared_error(data.radius());

    let trace = integrate_forward(&model, &path, &data, 16)?;
    let costate = integrate_costate(&model, &loss, &path, &data, &trace)?;
    let last = trace.node_count() - 1;
    for i in 0..data.len() {
        println!("sample {i}: x = {:?} -> X_1 = {:.4?}, p_0 = {:.4?}", data.x(i), trace.final_state(i), costate.costate(i, 0));
    }
    let m = fundamental_matrix(&model, &path, &data, &trace, 0, 0, last)?;
    println!("dX_1/dx for sample 0:{m:.5}");
    let pushed = push_forward(&trace, &data, last)?;
    println!("pushed-forward (X_1, y) pairs: {} atoms in dimension {}", pushed.len(), pushed.dim());
    Ok(())
}
