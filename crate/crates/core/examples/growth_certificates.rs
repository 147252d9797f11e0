//! Checks the growth and Lipschitz certificates of both vector fields.
//!
//! Run with `cargo run --example growth_certificates`.

use mflab::model::{certify_growth, GrowthCertificate};
use mflab::{Result, VectorFieldModel};

fn main() -> Result<()> {
    for d in [1, 2, 4] {
        for model in [VectorFieldModel::linear_tanh(d), VectorFieldModel::gated_tanh(d)] {
            let cert = model.certificate();
            let report = certify_growth(&model, 2000, 3.0, d as u64)?;
            println!(
                "{:?} d={d} m={}: C={:.3} p={} q={} | observed growth {:.3}, Lipschitz {:.3}",
                model.kind(),
                model.m(),
                cert.c,
                cert.p,
                cert.lipschitz_p,
                report.max_growth_ratio,
                report.max_lipschitz_ratio
            );
        }
    }
    let wrong = VectorFieldModel::gated_tanh(2).with_certificate(GrowthCertificate { c: 1e-3, p: 1.0, lipschitz_p: 2.0 });
    println!("deliberately wrong certificate: {:?}", certify_growth(&wrong, 100, 1.0, 0).unwrap_err());
    Ok(())
}
