//! Discrete probability measures over parameter and data space, piecewise-constant
//! parameter paths on the layer interval `[0, 1]`, and the transport-based
//! quantities built on them (layerwise W₂, path distance, Dirichlet energy).

mod io;
mod ot;

pub use io::{read_path_snapshot, write_forward_trace, write_path_snapshot, PathJson, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};
pub use ot::{w1, w2, w2_brute_force, w2_with, OtConfig, BRUTE_FORCE_MAX};

use crate::error::{Error, Result};

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// A finitely supported probability measure on ℝᵐ.
///
/// Points are stored row-major in a flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let dim = points.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: bad.len() });
        }
        Self::from_flat(dim, points.concat(), weights)
    }

    /// Uniform weights `1/N` on the given points.
    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn from_flat(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMeasure("zero-dimensional points".into()));
        }
        if weights.is_empty() {
            return Err(Error::InvalidMeasure("empty support".into()));
        }
        if points.len() != dim * weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} coordinates for {} points of dimension {dim}",
                points.len(),
                weights.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("measure points".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidMeasure("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}")));
        }
        Ok(Self { dim, points, weights })
    }

    pub fn uniform_flat(dim: usize, points: Vec<f64>) -> Result<Self> {
        let n = points.len().checked_div(dim).unwrap_or(0);
        Self::from_flat(dim, points, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn point_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.points.chunks_exact(self.dim)
    }

    pub fn flat_points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// True when every weight equals `1/N` up to rounding.
    pub fn is_uniform(&self) -> bool {
        let target = 1.0 / self.len() as f64;
        self.weights.iter().all(|w| (w - target).abs() <= 1e-15)
    }

    /// The pushforward under `θ ↦ θ + shift`.
    pub fn translated(&self, shift: &[f64]) -> Result<Self> {
        if shift.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: shift.len() });
        }
        let mut out = self.clone();
        for p in out.points.chunks_exact_mut(self.dim) {
            p.iter_mut().zip(shift).for_each(|(a, s)| *a += s);
        }
        Ok(out)
    }

    /// `∫|θ|² dη`.
    pub fn second_moment(&self) -> f64 {
        self.points().zip(&self.weights).map(|(p, w)| w * norm_sq(p)).sum()
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        if self.points.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("measure points".into()))
        }
    }
}

/// Piecewise-constant curve `t ↦ η_t` of parameter measures: `η_t = layers[k]`
/// for `t ∈ [t_k, t_{k+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterPath {
    layer_grid: Vec<f64>,
    layers: Vec<DiscreteMeasure>,
}

impl ParameterPath {
    pub fn new(layers: Vec<DiscreteMeasure>, layer_grid: Vec<f64>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidMeasure("path needs at least one layer".into()))?;
        let (n, m) = (first.len(), first.dim());
        for layer in &layers {
            if layer.dim() != m {
                return Err(Error::DimensionMismatch { expected: m, got: layer.dim() });
            }
            if layer.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "layers carry {} and {} particles",
                    n,
                    layer.len()
                )));
            }
        }
        if layer_grid.len() != layers.len() + 1 {
            return Err(Error::InvalidMeasure(format!(
                "{} layers need {} grid points, got {}",
                layers.len(),
                layers.len() + 1,
                layer_grid.len()
            )));
        }
        let ends_ok = layer_grid[0] == 0.0 && (layer_grid[layers.len()] - 1.0).abs() < 1e-14;
        if !ends_ok || layer_grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidMeasure("layer grid must increase from 0 to 1".into()));
        }
        Ok(Self { layer_grid, layers })
    }

    /// Layers on the uniform grid `t_k = k/L`.
    pub fn uniform(layers: Vec<DiscreteMeasure>) -> Result<Self> {
        let grid = uniform_grid(layers.len());
        Self::new(layers, grid)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Particle count per layer.
    pub fn particles(&self) -> usize {
        self.layers[0].len()
    }

    pub fn particle_dim(&self) -> usize {
        self.layers[0].dim()
    }

    pub fn layer_grid(&self) -> &[f64] {
        &self.layer_grid
    }

    pub fn layers(&self) -> &[DiscreteMeasure] {
        &self.layers
    }

    pub fn layer(&self, k: usize) -> &DiscreteMeasure {
        &self.layers[k]
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.layer_grid[k + 1] - self.layer_grid[k]
    }

    pub fn particle(&self, k: usize, j: usize) -> &[f64] {
        self.layers[k].point(j)
    }

    pub fn particle_mut(&mut self, k: usize, j: usize) -> &mut [f64] {
        self.layers[k].point_mut(j)
    }

    /// Same grid and particle shape.
    pub fn same_shape(&self, other: &Self) -> bool {
        self.layer_grid == other.layer_grid
            && self.particles() == other.particles()
            && self.particle_dim() == other.particle_dim()
    }

    /// Applies `f(k, j, θ)` to every particle in place and re-checks finiteness.
    pub fn map_particles(&mut self, mut f: impl FnMut(usize, usize, &mut [f64])) -> Result<()> {
        for (k, layer) in self.layers.iter_mut().enumerate() {
            for j in 0..layer.len() {
                f(k, j, layer.point_mut(j));
            }
        }
        self.layers.iter().try_for_each(DiscreteMeasure::check_finite)
    }
}

pub fn uniform_grid(layers: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..=layers).map(|k| k as f64 / layers as f64).collect();
    if let Some(last) = grid.last_mut() {
        *last = 1.0;
    }
    grid
}

/// Empirical data distribution `μ₀` on `ℝᵈ × ℝᵈ`.
///
/// An empty sample set is allowed and contributes zero loss; it is the
/// natural way to isolate the regularizer.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMeasure {
    dim: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
    weights: Vec<f64>,
    radius: f64,
}

impl DataMeasure {
    /// Samples `(x_i, y_i)` with weights, all inside the ball of `radius`
    /// in `ℝᵈ × ℝᵈ`.
    pub fn new(samples: Vec<(Vec<f64>, Vec<f64>)>, weights: Vec<f64>, radius: f64) -> Result<Self> {
        let dim = samples.first().map(|(x, _)| x.len()).unwrap_or(0);
        if samples.len() != weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} samples but {} weights",
                samples.len(),
                weights.len()
            )));
        }
        if samples.is_empty() || dim == 0 {
            return Err(Error::InvalidMeasure("data measure needs samples".into()));
        }
        let mut xs = Vec::with_capacity(dim * samples.len());
        let mut ys = Vec::with_capacity(dim * samples.len());
        for (x, y) in &samples {
            for v in [x, y] {
                if v.len() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: v.len() });
                }
            }
            if x.iter().chain(y).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("data samples".into()));
            }
            if (norm_sq(x) + norm_sq(y)).sqrt() > radius {
                return Err(Error::InvalidMeasure(format!("sample outside declared radius {radius}")));
            }
            xs.extend_from_slice(x);
            ys.extend_from_slice(y);
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidMeasure("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}")));
        }
        Ok(Self { dim, xs, ys, weights, radius })
    }

    /// Uniform weights; the declared radius is the tightest enclosing one.
    pub fn uniform(samples: Vec<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        let n = samples.len();
        let radius = samples
            .iter()
            .map(|(x, y)| (norm_sq(x) + norm_sq(y)).sqrt())
            .fold(0.0, f64::max);
        Self::new(samples, vec![1.0 / n.max(1) as f64; n], radius)
    }

    /// No samples at all; the loss term vanishes identically.
    pub fn empty(dim: usize) -> Self {
        Self { dim, xs: Vec::new(), ys: Vec::new(), weights: Vec::new(), radius: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn y(&self, i: usize) -> &[f64] {
        &self.ys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }
}

/// A coupling between two discrete measures.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// `(source index, target index, mass)`, sorted lexicographically by index.
    pub pairs: Vec<(usize, usize, f64)>,
    /// `Σ mass · |a_i − b_j|²`.
    pub cost: f64,
}

impl TransportPlan {
    /// Source and target marginals of the plan.
    pub fn marginals(&self, source_len: usize, target_len: usize) -> (Vec<f64>, Vec<f64>) {
        let mut a = vec![0.0; source_len];
        let mut b = vec![0.0; target_len];
        for &(i, j, mass) in &self.pairs {
            a[i] += mass;
            b[j] += mass;
        }
        (a, b)
    }

    /// For a plan between equal-size uniform measures, the target index of
    /// each source point.
    pub fn as_permutation(&self, n: usize) -> Option<Vec<usize>> {
        if self.pairs.len() != n {
            return None;
        }
        let mut perm = vec![usize::MAX; n];
        for &(i, j, _) in &self.pairs {
            perm[i] = j;
        }
        perm.iter().all(|&j| j < n).then_some(perm)
    }
}

/// `sqrt(Σ_k Δt_k W₂²(p_k, q_k))`, the L² distance between parameter paths.
pub fn path_distance(p: &ParameterPath, q: &ParameterPath) -> Result<f64> {
    Ok(path_distance_sq(p, q)?.sqrt())
}

pub(crate) fn path_distance_sq(p: &ParameterPath, q: &ParameterPath) -> Result<f64> {
    if p.layer_grid != q.layer_grid {
        return Err(Error::GridMismatch);
    }
    let mut total = 0.0;
    for k in 0..p.num_layers() {
        let (d, _) = w2(p.layer(k), q.layer(k))?;
        total += p.dt(k) * d * d;
    }
    Ok(total)
}

/// The measure `∫₀¹ η_t dt` on ℝᵐ: all layers pooled, weights scaled by `Δt_k`.
pub fn time_marginal(p: &ParameterPath) -> DiscreteMeasure {
    let m = p.particle_dim();
    let mut points = Vec::with_capacity(p.num_layers() * p.particles() * m);
    let mut weights = Vec::with_capacity(p.num_layers() * p.particles());
    for (k, layer) in p.layers().iter().enumerate() {
        points.extend_from_slice(layer.flat_points());
        weights.extend(layer.weights().iter().map(|w| w * p.dt(k)));
    }
    DiscreteMeasure { dim: m, points, weights }
}

/// Forward-difference estimate of `½∫₀¹|η̇_t|² dt`: consecutive layer
/// distances over the spacing between layer midpoints.
pub fn dirichlet_energy(p: &ParameterPath) -> Result<f64> {
    let l = p.num_layers();
    if l < 2 {
        return Err(Error::TooFewLayers(l));
    }
    let grid = p.layer_grid();
    let mut total = 0.0;
    for k in 0..l - 1 {
        let spacing = 0.5 * (grid[k + 2] - grid[k]);
        let (d, _) = w2(p.layer(k + 1), p.layer(k))?;
        total += d * d / spacing;
    }
    Ok(0.5 * total)
}

/// Largest particle norm over all layers.
pub fn support_radius(p: &ParameterPath) -> f64 {
    p.layers()
        .iter()
        .flat_map(|layer| layer.points().map(norm_sq))
        .fold(0.0, f64::max)
        .sqrt()
}

/// `∫₀¹∫|θ|² dη_t dt`.
pub fn second_moment(p: &ParameterPath) -> f64 {
    p.layers().iter().enumerate().map(|(k, layer)| p.dt(k) * layer.second_moment()).sum()
}

pub(crate) fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub(crate) fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::uniform(vec![p.to_vec()]).unwrap()
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(DiscreteMeasure::new(vec![vec![0.0], vec![1.0]], vec![0.5, 0.6]).is_err());
        assert!(DiscreteMeasure::new(vec![vec![0.0]], vec![-1.0]).is_err());
        assert!(DiscreteMeasure::new(vec![vec![f64::NAN]], vec![1.0]).is_err());
        assert!(DiscreteMeasure::new(vec![], vec![]).is_err());
    }

    #[test]
    fn path_rejects_ragged_layers() {
        let a = DiscreteMeasure::uniform(vec![vec![0.0], vec![1.0]]).unwrap();
        let b = single(&[0.0]);
        assert!(matches!(ParameterPath::uniform(vec![a, b]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn support_radius_of_3_4_is_5() {
        let p = ParameterPath::uniform(vec![single(&[3.0, 4.0])]).unwrap();
        assert_eq!(support_radius(&p), 5.0);
        let zero = ParameterPath::uniform(vec![single(&[0.0, 0.0]), single(&[0.0, 0.0])]).unwrap();
        assert_eq!(support_radius(&zero), 0.0);
    }

    #[test]
    fn second_moment_single_particle() {
        let p = ParameterPath::uniform(vec![single(&[1.0, -2.0])]).unwrap();
        assert_eq!(second_moment(&p), 5.0);
    }

    #[test]
    fn dirichlet_needs_two_layers() {
        let p = ParameterPath::uniform(vec![single(&[1.0])]).unwrap();
        assert_eq!(dirichlet_energy(&p), Err(Error::TooFewLayers(1)));
    }

    #[test]
    fn dirichlet_linear_motion() {
        let u = [0.6, -0.8, 2.0];
        let usq = norm_sq(&u);
        for l in [2usize, 4, 16, 64] {
            let layers = (0..l)
                .map(|k| {
                    let t = k as f64 / l as f64;
                    single(&u.map(|c| c * t))
                })
                .collect();
            let p = ParameterPath::uniform(layers).unwrap();
            let expected = 0.5 * usq * (1.0 - 1.0 / l as f64);
            assert!((dirichlet_energy(&p).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn time_marginal_pools_layers() {
        let a = DiscreteMeasure::uniform(vec![vec![0.0], vec![1.0]]).unwrap();
        let b = DiscreteMeasure::uniform(vec![vec![2.0], vec![3.0]]).unwrap();
        let p = ParameterPath::uniform(vec![a, b]).unwrap();
        let tm = time_marginal(&p);
        assert_eq!(tm.len(), 4);
        assert!(tm.weights().iter().all(|w| (w - 0.25).abs() < 1e-15));
        let same = ParameterPath::uniform(vec![single(&[1.0]), single(&[1.0])]).unwrap();
        let tm = time_marginal(&same);
        assert_eq!(tm.weights().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn path_distance_single_layer_is_w2() {
        let a = DiscreteMeasure::uniform(vec![vec![0.0, 1.0], vec![2.0, 0.0]]).unwrap();
        let b = DiscreteMeasure::uniform(vec![vec![1.0, 1.0], vec![-2.0, 0.5]]).unwrap();
        let (d, _) = w2(&a, &b).unwrap();
        let p = ParameterPath::uniform(vec![a.clone()]).unwrap();
        let q = ParameterPath::uniform(vec![b]).unwrap();
        assert_eq!(path_distance(&p, &q).unwrap(), d);
        assert_eq!(path_distance(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn path_distance_grid_mismatch() {
        let a = single(&[0.0]);
        let p = ParameterPath::uniform(vec![a.clone(), a.clone()]).unwrap();
        let q = ParameterPath::new(vec![a.clone(), a], vec![0.0, 0.25, 1.0]).unwrap();
        assert_eq!(path_distance(&p, &q), Err(Error::GridMismatch));
    }

    #[test]
    fn data_radius_is_enforced() {
        let s = vec![(vec![3.0], vec![4.0])];
        assert!(DataMeasure::new(s.clone(), vec![1.0], 4.9).is_err());
        assert!(DataMeasure::new(s, vec![1.0], 5.0).is_ok());
    }
}
