//! Built-in data generators. Both keep `|x|, |y| ≤ radius`, so `μ₀` is
//! compactly supported in the ball of radius `√2·radius`.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Deserialize;

use super::config::{DataGenerator, DataSection};
use crate::error::{Error, Result};
use crate::measures::{norm_sq, DataMeasure};

const LABEL_NOISE: f64 = 0.1;

fn clip(v: &mut [f64], radius: f64) {
    let n = norm_sq(v).sqrt();
    if n > radius {
        v.iter_mut().for_each(|c| *c *= radius / n);
    }
}

/// `A = 0.8·R`, with `R` rotating consecutive coordinate pairs by π/4 and
/// negating a trailing odd coordinate.
pub fn target_map(x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let (c, s) = (FRAC_PI_4.cos(), FRAC_PI_4.sin());
    let mut y = vec![0.0; d];
    let mut i = 0;
    while i + 1 < d {
        y[i] = 0.8 * (c * x[i] - s * x[i + 1]);
        y[i + 1] = 0.8 * (s * x[i] + c * x[i + 1]);
        i += 2;
    }
    if d % 2 == 1 {
        y[d - 1] = -0.8 * x[d - 1];
    }
    y
}

/// `x` clipped Gaussian, `y = A·x + noise`, both clipped to `radius`.
pub fn gaussian_pairs(n: usize, d: usize, radius: f64, seed: u64) -> Result<DataMeasure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, LABEL_NOISE).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let samples = (0..n)
        .map(|_| {
            let mut x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            clip(&mut x, radius);
            let mut y: Vec<f64> = target_map(&x).into_iter().map(|v| v + noise.sample(&mut rng)).collect();
            clip(&mut y, radius);
            (x, y)
        })
        .collect();
    DataMeasure::new(samples, vec![1.0 / n as f64; n], radius * 2f64.sqrt())
}

/// Points on a ring of radius `radius/2` in the first two coordinates with
/// labels rotated by a quarter turn; for `d = 1` the ring is `{±r}` and the
/// label is `−x`.
pub fn circle_labels(n: usize, d: usize, radius: f64, seed: u64) -> Result<DataMeasure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = 0.5 * radius;
    let samples = (0..n)
        .map(|i| {
            let mut x = vec![0.0; d];
            let mut y = vec![0.0; d];
            if d == 1 {
                x[0] = if i % 2 == 0 { r } else { -r };
                y[0] = -x[0];
            } else {
                let angle = 2.0 * PI * i as f64 / n as f64 + rng.random_range(-0.1..0.1);
                x[0] = r * angle.cos();
                x[1] = r * angle.sin();
                y[0] = r * (angle + FRAC_PI_2).cos();
                y[1] = r * (angle + FRAC_PI_2).sin();
            }
            (x, y)
        })
        .collect();
    DataMeasure::new(samples, vec![1.0 / n as f64; n], radius * 2f64.sqrt())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DataFile {
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    weights: Option<Vec<f64>>,
}

/// `{"x": [[...]], "y": [[...]], "weights": [...]}`; weights default to uniform.
pub fn from_file(path: &Path, d: usize) -> Result<DataMeasure> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    let raw: DataFile = serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    if raw.x.len() != raw.y.len() {
        return Err(Error::InvalidArgument("x and y have different lengths".into()));
    }
    if let Some(bad) = raw.x.iter().chain(&raw.y).find(|v| v.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: bad.len() });
    }
    let n = raw.x.len();
    let weights = raw.weights.unwrap_or_else(|| vec![1.0 / n.max(1) as f64; n]);
    let samples: Vec<_> = raw.x.into_iter().zip(raw.y).collect();
    let radius = samples.iter().map(|(x, y)| (norm_sq(x) + norm_sq(y)).sqrt()).fold(0.0, f64::max);
    DataMeasure::new(samples, weights, radius)
}

pub fn generate(section: &DataSection, d: usize, seed: u64) -> Result<DataMeasure> {
    match section.generator {
        DataGenerator::GaussianPairs => gaussian_pairs(section.n, d, section.radius, seed),
        DataGenerator::CircleLabels => circle_labels(section.n, d, section.radius, seed),
        DataGenerator::File => {
            let path = section.file.as_ref().ok_or_else(|| Error::InvalidArgument("data.file missing".into()))?;
            from_file(path, d)
        }
    }
}
