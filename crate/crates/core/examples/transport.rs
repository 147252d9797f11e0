//! Exact W₂ between point clouds, the optimal plan, and path distances.
//!
//! Run with `cargo run --example transport`.

use mflab::flow::init_path;
use mflab::measures::{dirichlet_energy, path_distance, w1, w2, w2_brute_force};
use mflab::{DiscreteMeasure, Result};

fn main() -> Result<()> {
    let a = DiscreteMeasure::uniform(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]])?;
    let b = a.translated(&[0.5, -0.25])?;
    let (d, plan) = w2(&a, &b)?;
    println!("W2 of a translation by (0.5, -0.25): {d:.6} (brute force {:.6})", w2_brute_force(&a, &b)?);
    println!("matching: {:?}", plan.as_permutation(a.len()).unwrap());

    // Unequal weights go through the min-cost flow solver.
    let c = DiscreteMeasure::new(vec![vec![0.0, 0.0], vec![2.0, 2.0]], vec![0.25, 0.75])?;
    let (d, plan) = w2(&a, &c)?;
    println!("W2 to a two-atom measure: {d:.6}, W1: {:.6}", w1(&a, &c)?);
    for (i, j, mass) in &plan.pairs {
        println!("  {i} -> {j}: {mass:.4}");
    }

    let p = init_path(4, 8, 2, 1.0, 1, 1)?;
    let q = init_path(4, 8, 2, 1.0, 1, 2)?;
    println!("path distance {:.6}", path_distance(&p, &q)?);
    println!("Dirichlet energy of p {:.6}, of q {:.6}", dirichlet_energy(&p)?, dirichlet_energy(&q)?);
    Ok(())
}
