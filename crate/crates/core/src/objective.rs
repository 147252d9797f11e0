//! The regularized objective `J(η) = ∫ℓ dμ₁^η + (λ/2)∫₀¹∫|θ|² dη_t dt`, its
//! flat derivative, and the Wasserstein gradient at particle locations.
//!
//! With the RK4 scheme of [`crate::dynamics`], the flat derivative of the
//! discrete loss with respect to layer `k` is the layer average
//!
//! ```text
//! δL/δη(k, θ) = (1/Δt_k) Σ_i w_i Σ_{steps in k} Σ_q ⟨k̄_q(x_i), v(z_q(x_i), θ)⟩
//! ```
//!
//! where `z_q` are stage states and `k̄_q` their adjoint weights. As the step
//! count grows it tends to the layer average of `⟨∇ₓφ_t, v_θ⟩_{μ_t}`. The
//! gradient field is `G = λθ + ∇_θ δL/δη`, which equals
//! `∂J/∂θ_j^{(k)} / (w_j Δt_k)` exactly.

use rayon::prelude::*;

use crate::dynamics::{integrate_costate, integrate_forward, CostateTrace, ForwardTrace};
use crate::error::{Error, Result};
use crate::measures::{norm_sq, second_moment, DataMeasure, ParameterPath};
use crate::model::{LossModel, VectorFieldModel};

/// Everything that fixes `J` apart from the path itself.
#[derive(Debug, Clone)]
pub struct Problem {
    pub model: VectorFieldModel,
    pub loss: LossModel,
    pub data: DataMeasure,
    pub lambda: f64,
    pub steps_per_layer: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveReport {
    pub j: f64,
    pub loss: f64,
    pub regularizer: f64,
    /// Filled when the gradient was computed alongside.
    pub slope: Option<f64>,
}

/// One `m`-vector per particle, laid out like the path it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    layers: usize,
    particles: usize,
    dim: usize,
    values: Vec<f64>,
}

impl GradientField {
    pub fn zeros_like(path: &ParameterPath) -> Self {
        let (layers, particles, dim) = (path.num_layers(), path.particles(), path.particle_dim());
        Self { layers, particles, dim, values: vec![0.0; layers * particles * dim] }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, k: usize, j: usize) -> &[f64] {
        let idx = (k * self.particles + j) * self.dim;
        &self.values[idx..idx + self.dim]
    }

    pub fn get_mut(&mut self, k: usize, j: usize) -> &mut [f64] {
        let idx = (k * self.particles + j) * self.dim;
        &mut self.values[idx..idx + self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Largest per-particle Euclidean norm.
    pub fn inf_norm(&self) -> f64 {
        self.values.chunks_exact(self.dim).map(norm_sq).fold(0.0, f64::max).sqrt()
    }

    pub fn matches(&self, path: &ParameterPath) -> bool {
        self.layers == path.num_layers() && self.particles == path.particles() && self.dim == path.particle_dim()
    }
}

impl Problem {
    pub fn new(model: VectorFieldModel, loss: LossModel, data: DataMeasure, lambda: f64, steps_per_layer: usize) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
        }
        if data.dim() != model.d() {
            return Err(Error::DimensionMismatch { expected: model.d(), got: data.dim() });
        }
        Ok(Self { model, loss, data, lambda, steps_per_layer })
    }

    /// Same model and data, different λ.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(self.model.clone(), self.loss, self.data.clone(), lambda, self.steps_per_layer)
    }

    pub fn forward(&self, path: &ParameterPath) -> Result<ForwardTrace> {
        integrate_forward(&self.model, path, &self.data, self.steps_per_layer)
    }

    fn loss_from_trace(&self, trace: &ForwardTrace) -> f64 {
        (0..self.data.len())
            .map(|i| self.data.weights()[i] * self.loss.eval(trace.final_state(i), self.data.y(i)))
            .sum()
    }

    /// `J`, `L` and the regularizer from one forward pass.
    pub fn eval_objective(&self, path: &ParameterPath) -> Result<ObjectiveReport> {
        let trace = self.forward(path)?;
        let loss = self.loss_from_trace(&trace);
        let regularizer = 0.5 * self.lambda * second_moment(path);
        Ok(ObjectiveReport { j: loss + regularizer, loss, regularizer, slope: None })
    }

    /// Handle evaluating `δL/δη[η](k, θ)` at arbitrary probes `θ`.
    pub fn functional_derivative(&self, path: &ParameterPath) -> Result<FunctionalDerivative> {
        let trace = self.forward(path)?;
        let costate = integrate_costate(&self.model, &self.loss, path, &self.data, &trace)?;
        Ok(FunctionalDerivative {
            model: self.model.clone(),
            weights: self.data.weights().to_vec(),
            dts: (0..path.num_layers()).map(|k| path.dt(k)).collect(),
            steps_per_layer: self.steps_per_layer,
            trace,
            costate,
        })
    }

    /// `∇_θ δL/δη` at every particle (no regularizer), with the objective
    /// report of the same forward pass.
    pub fn loss_gradient(&self, path: &ParameterPath) -> Result<(GradientField, ObjectiveReport)> {
        let fd = self.functional_derivative(path)?;
        let loss = self.loss_from_trace(&fd.trace);
        let regularizer = 0.5 * self.lambda * second_moment(path);
        let (layers, particles, m) = (path.num_layers(), path.particles(), path.particle_dim());
        let values: Vec<f64> = (0..layers * particles)
            .into_par_iter()
            .with_min_len(4)
            .flat_map_iter(|idx| {
                let (k, j) = (idx / particles, idx % particles);
                fd.gradient(k, path.particle(k, j))
            })
            .collect();
        debug_assert_eq!(values.len(), layers * particles * m);
        let field = GradientField { layers, particles, dim: m, values };
        Ok((field, ObjectiveReport { j: loss + regularizer, loss, regularizer, slope: None }))
    }

    /// `G[k][j] = λθ_j^{(k)} + ∇_θ δL/δη(k, θ_j^{(k)})` and the objective
    /// report (slope filled in).
    pub fn wasserstein_gradient(&self, path: &ParameterPath) -> Result<(GradientField, ObjectiveReport)> {
        let (mut field, mut report) = self.loss_gradient(path)?;
        for k in 0..path.num_layers() {
            for j in 0..path.particles() {
                let theta = path.particle(k, j);
                field.get_mut(k, j).iter_mut().zip(theta).for_each(|(g, t)| *g += self.lambda * t);
            }
        }
        if field.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient field".into()));
        }
        report.slope = Some(metric_slope(path, &field)?);
        Ok((field, report))
    }

    /// `max_{k,j} |G[k][j]|`.
    pub fn critical_point_residual(&self, path: &ParameterPath) -> Result<f64> {
        Ok(self.wasserstein_gradient(path)?.0.inf_norm())
    }

    /// Central differences of `J` in every particle coordinate, rescaled by
    /// `1/(w_j Δt_k)` so the result is directly comparable to
    /// [`Problem::wasserstein_gradient`].
    pub fn finite_difference_gradient(&self, path: &ParameterPath, h: f64) -> Result<GradientField> {
        let mut out = GradientField::zeros_like(path);
        let m = path.particle_dim();
        let coords: Vec<(usize, usize, usize)> = (0..path.num_layers())
            .flat_map(|k| (0..path.particles()).flat_map(move |j| (0..m).map(move |c| (k, j, c))))
            .collect();
        let values: Vec<Result<f64>> = coords
            .par_iter()
            .map(|&(k, j, c)| {
                let mut plus = path.clone();
                plus.particle_mut(k, j)[c] += h;
                let mut minus = path.clone();
                minus.particle_mut(k, j)[c] -= h;
                let diff = self.eval_objective(&plus)?.j - self.eval_objective(&minus)?.j;
                Ok(diff / (2.0 * h) / (path.layer(k).weights()[j] * path.dt(k)))
            })
            .collect();
        for (&(k, j, c), v) in coords.iter().zip(values) {
            out.get_mut(k, j)[c] = v?;
        }
        Ok(out)
    }
}

/// `sqrt(Σ_k Δt_k Σ_j w_j |G[k][j]|²)`, the norm of the gradient in
/// `L²(0,1; L²(η_t))`.
pub fn metric_slope(path: &ParameterPath, gradient: &GradientField) -> Result<f64> {
    if !gradient.matches(path) {
        return Err(Error::ShapeMismatch(format!(
            "gradient {}x{}x{} for path {}x{}x{}",
            gradient.layers,
            gradient.particles,
            gradient.dim,
            path.num_layers(),
            path.particles(),
            path.particle_dim()
        )));
    }
    let mut total = 0.0;
    for k in 0..path.num_layers() {
        let layer_sum: f64 =
            path.layer(k).weights().iter().enumerate().map(|(j, w)| w * norm_sq(gradient.get(k, j))).sum();
        total += path.dt(k) * layer_sum;
    }
    Ok(total.sqrt())
}

/// Flat derivative of the loss term, evaluated lazily at probe parameters.
#[derive(Debug, Clone)]
pub struct FunctionalDerivative {
    model: VectorFieldModel,
    weights: Vec<f64>,
    dts: Vec<f64>,
    steps_per_layer: usize,
    trace: ForwardTrace,
    costate: CostateTrace,
}

impl FunctionalDerivative {
    pub fn trace(&self) -> &ForwardTrace {
        &self.trace
    }

    pub fn costate(&self) -> &CostateTrace {
        &self.costate
    }

    fn steps(&self, k: usize) -> std::ops::Range<usize> {
        k * self.steps_per_layer..(k + 1) * self.steps_per_layer
    }

    /// `δL/δη(k, θ)`.
    pub fn eval(&self, k: usize, theta: &[f64]) -> f64 {
        let d = self.model.d();
        let mut v = vec![0.0; d];
        let mut total = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            let mut acc = 0.0;
            for s in self.steps(k) {
                for q in 0..4 {
                    v.iter_mut().for_each(|x| *x = 0.0);
                    self.model.add_v(self.trace.stage(i, s, q), theta, 1.0, &mut v);
                    acc += self.costate.stage_adjoint(i, s, q).iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            total += w * acc;
        }
        total / self.dts[k]
    }

    /// `∇_θ δL/δη(k, θ)`.
    pub fn gradient(&self, k: usize, theta: &[f64]) -> Vec<f64> {
        let mut total = vec![0.0; self.model.m()];
        let mut acc = vec![0.0; self.model.m()];
        for (i, w) in self.weights.iter().enumerate() {
            acc.iter_mut().for_each(|x| *x = 0.0);
            for s in self.steps(k) {
                for q in 0..4 {
                    self.model.add_vjp_theta(self.trace.stage(i, s, q), theta, self.costate.stage_adjoint(i, s, q), 1.0, &mut acc);
                }
            }
            total.iter_mut().zip(&acc).for_each(|(t, a)| *t += w * a);
        }
        let inv = 1.0 / self.dts[k];
        total.iter_mut().for_each(|t| *t *= inv);
        total
    }
}

/// Largest entrywise `|a − b| / max(|a|, |b|, 10⁻³·‖a‖_∞)`. The floor keeps
/// entries that vanish up to roundoff from dominating.
pub fn max_relative_error(a: &GradientField, b: &GradientField) -> f64 {
    let floor = (1e-3 * a.inf_norm()).max(f64::MIN_POSITIVE);
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::DiscreteMeasure;

    fn path_from(m: usize, layers: &[&[f64]]) -> ParameterPath {
        ParameterPath::uniform(
            layers.iter().map(|coords| DiscreteMeasure::uniform_flat(m, coords.to_vec()).unwrap()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_parameters_give_data_loss() {
        let data = DataMeasure::new(vec![(vec![1.0], vec![0.0]), (vec![-0.5], vec![0.5])], vec![0.25, 0.75], 2.0).unwrap();
        let problem = Problem::new(VectorFieldModel::linear_tanh(1), LossModel::squared_error(1.0), data, 0.3, 4).unwrap();
        let path = path_from(2, &[&[0.0, 0.0, 0.0, 0.0], &[0.0; 4]]);
        let r = problem.eval_objective(&path).unwrap();
        assert_eq!(r.regularizer, 0.0);
        assert!((r.j - (0.25 * 1.0 + 0.75 * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn matched_labels_with_zero_field_give_zero() {
        let data = DataMeasure::uniform(vec![(vec![0.4, 0.1], vec![0.4, 0.1])]).unwrap();
        let problem = Problem::new(VectorFieldModel::gated_tanh(2), LossModel::squared_error(1.0), data, 1.0, 2).unwrap();
        // a = 0 switches the gated field off regardless of W and b.
        let mut theta = vec![0.3; 8];
        theta[..2].copy_from_slice(&[0.0, 0.0]);
        let path = path_from(8, &[&theta]);
        let (g, r) = problem.loss_gradient(&path).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(g.inf_norm() == 0.0);
    }

    #[test]
    fn empty_data_gives_pure_regularizer_gradient() {
        let problem =
            Problem::new(VectorFieldModel::linear_tanh(1), LossModel::squared_error(1.0), DataMeasure::empty(1), 0.5, 3).unwrap();
        let path = path_from(2, &[&[1.0, -2.0, 0.5, 0.25]]);
        let (g, r) = problem.wasserstein_gradient(&path).unwrap();
        assert_eq!(g.as_slice(), &[0.5, -1.0, 0.25, 0.125]);
        assert_eq!(r.loss, 0.0);
        assert!((r.regularizer - 0.25 * (5.0 + 0.3125) * 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_probe_has_zero_derivative() {
        let data = DataMeasure::uniform(vec![(vec![0.5], vec![1.0]), (vec![-0.5], vec![0.0])]).unwrap();
        let problem = Problem::new(VectorFieldModel::linear_tanh(1), LossModel::squared_error(1.0), data, 0.1, 4).unwrap();
        let path = path_from(2, &[&[0.3, -0.1, 0.2, 0.4], &[0.1, 0.1, -0.5, 0.0]]);
        let fd = problem.functional_derivative(&path).unwrap();
        assert_eq!(fd.eval(0, &[0.0, 0.0]), 0.0);
        assert_eq!(fd.eval(1, &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn zero_field_derivative_reduces_to_data_term() {
        let data = DataMeasure::uniform(vec![(vec![0.5], vec![1.0]), (vec![-0.5], vec![0.0])]).unwrap();
        let loss = LossModel::squared_error(1.0);
        let problem = Problem::new(VectorFieldModel::linear_tanh(1), loss, data.clone(), 0.1, 4).unwrap();
        let path = path_from(2, &[&[0.0; 4], &[0.0; 4]]);
        let fd = problem.functional_derivative(&path).unwrap();
        let probe = [0.7, -0.3];
        let expected: f64 = (0..2)
            .map(|i| {
                let g = loss.grad(data.x(i), data.y(i));
                let v = problem.model.eval_v(data.x(i), &probe).unwrap();
                0.5 * (g[0] * v[0])
            })
            .sum();
        for k in 0..2 {
            assert!((fd.eval(k, &probe) - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn slope_examples() {
        let path = path_from(2, &[&[0.0, 0.0]]);
        let mut g = GradientField::zeros_like(&path);
        assert_eq!(metric_slope(&path, &g).unwrap(), 0.0);
        g.get_mut(0, 0).copy_from_slice(&[3.0, 4.0]);
        assert_eq!(metric_slope(&path, &g).unwrap(), 5.0);
        let other = path_from(2, &[&[0.0, 0.0], &[0.0, 0.0]]);
        assert!(matches!(metric_slope(&other, &g), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn lambda_must_be_positive() {
        let r = Problem::new(VectorFieldModel::linear_tanh(1), LossModel::squared_error(1.0), DataMeasure::empty(1), 0.0, 3);
        assert!(r.is_err());
    }
}
