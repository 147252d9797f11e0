#![allow(dead_code)]

use mflab::flow::init_path;
use mflab::measures::w2;
use mflab::{DataMeasure, DiscreteMeasure, LossModel, ParameterPath, Problem, VectorFieldModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GOLDEN_CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/gd-linear-tanh.toml");

/// Random problem with `d ≤ 4`, `m ≤ 20`, `L ≤ 4`, `N ≤ 8`, `n ≤ 8`.
pub fn random_instance(seed: u64, gated: bool) -> (Problem, ParameterPath) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = if gated { rng.random_range(1..=3) } else { rng.random_range(1..=4) };
    let model = if gated { VectorFieldModel::gated_tanh(d) } else { VectorFieldModel::linear_tanh(d) };
    let n = rng.random_range(1..=8);
    let samples = (0..n)
        .map(|_| ((0..d).map(|_| rng.random_range(-1.0..1.0)).collect(), (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    let data = DataMeasure::uniform(samples).unwrap();
    let loss = LossModel::squared_error(data.radius());
    let lambda = rng.random_range(0.05..0.5);
    let problem = Problem::new(model, loss, data, lambda, 8).unwrap();
    let path = init_path(rng.random_range(1..=4), rng.random_range(1..=8), problem.model.m(), 0.7, 1, rng.random()).unwrap();
    (problem, path)
}

/// `(1−s)·p + s·q` layerwise, as a path with `2N` weighted particles.
pub fn mixture(p: &ParameterPath, q: &ParameterPath, s: f64) -> ParameterPath {
    let layers = (0..p.num_layers())
        .map(|k| {
            let (a, b) = (p.layer(k), q.layer(k));
            let points = a.points().chain(b.points()).map(|x| x.to_vec()).collect();
            let weights = a.weights().iter().map(|w| (1.0 - s) * w).chain(b.weights().iter().map(|w| s * w)).collect();
            DiscreteMeasure::new(points, weights).unwrap()
        })
        .collect();
    ParameterPath::new(layers, p.layer_grid().to_vec()).unwrap()
}

/// Displacement `T(θ) − θ` of each particle of `p` under the optimal
/// matching onto `q`.
pub fn geodesic_direction(p: &ParameterPath, q: &ParameterPath) -> Vec<Vec<Vec<f64>>> {
    (0..p.num_layers())
        .map(|k| {
            let (_, plan) = w2(p.layer(k), q.layer(k)).unwrap();
            let perm = plan.as_permutation(p.particles()).unwrap();
            (0..p.particles())
                .map(|j| q.particle(k, perm[j]).iter().zip(p.particle(k, j)).map(|(a, b)| a - b).collect())
                .collect()
        })
        .collect()
}

pub fn displaced(p: &ParameterPath, dir: &[Vec<Vec<f64>>], s: f64) -> ParameterPath {
    let mut out = p.clone();
    out.map_particles(|k, j, th| th.iter_mut().zip(&dir[k][j]).for_each(|(t, v)| *t += s * v)).unwrap();
    out
}
