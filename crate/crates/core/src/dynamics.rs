//! Data flow map `ẋ = v_{η_t}(x)` under a piecewise-constant parameter path,
//! its discrete adjoint, and the linearized flow.
//!
//! Each layer is integrated with `S` classical RK4 steps under the frozen
//! mean field `v̄_k(x) = Σ_j w_j v(x, θ_j^{(k)})`. The costate sweep is the
//! exact transpose of that scheme, so gradients assembled from it match
//! finite differences of the discrete objective to rounding error.

use std::hash::{DefaultHasher, Hash, Hasher};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measures::{norm_sq, DataMeasure, DiscreteMeasure, ParameterPath};
use crate::model::{LossModel, VectorFieldModel};

pub const DEFAULT_STEPS_PER_LAYER: usize = 8;

/// Samples per rayon task; below this the sweep stays on one thread.
const PAR_CHUNK: usize = 16;

/// The mean field of one layer.
pub(crate) struct LayerField<'a> {
    model: &'a VectorFieldModel,
    layer: &'a DiscreteMeasure,
    // θ-linear models collapse to a single averaged parameter.
    mean: Option<Vec<f64>>,
}

impl<'a> LayerField<'a> {
    pub(crate) fn new(model: &'a VectorFieldModel, layer: &'a DiscreteMeasure) -> Self {
        let mean = model.is_theta_linear().then(|| {
            let mut mean = vec![0.0; layer.dim()];
            for (p, w) in layer.points().zip(layer.weights()) {
                mean.iter_mut().zip(p).for_each(|(m, c)| *m += w * c);
            }
            mean
        });
        Self { model, layer, mean }
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        match &self.mean {
            Some(theta) => self.model.add_v(x, theta, 1.0, out),
            None => {
                for (p, w) in self.layer.points().zip(self.layer.weights()) {
                    self.model.add_v(x, p, *w, out);
                }
            }
        }
    }

    /// `out += (∂ₓv̄)ᵀ lam`.
    fn add_vjp_x(&self, x: &[f64], lam: &[f64], out: &mut [f64]) {
        match &self.mean {
            Some(theta) => self.model.add_vjp_x(x, theta, lam, 1.0, out),
            None => {
                for (p, w) in self.layer.points().zip(self.layer.weights()) {
                    self.model.add_vjp_x(x, p, lam, *w, out);
                }
            }
        }
    }

    fn jac_x(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        match &self.mean {
            Some(theta) => self.model.add_jac_x(x, theta, 1.0, out),
            None => {
                for (p, w) in self.layer.points().zip(self.layer.weights()) {
                    self.model.add_jac_x(x, p, *w, out);
                }
            }
        }
    }
}

/// Node times and step sizes of the RK4 grid.
#[derive(Debug, Clone, PartialEq)]
struct TimeGrid {
    layer_grid: Vec<f64>,
    steps_per_layer: usize,
}

impl TimeGrid {
    fn layers(&self) -> usize {
        self.layer_grid.len() - 1
    }

    fn steps(&self) -> usize {
        self.layers() * self.steps_per_layer
    }

    fn layer_of_step(&self, s: usize) -> usize {
        s / self.steps_per_layer
    }

    fn step_size(&self, s: usize) -> f64 {
        let k = self.layer_of_step(s);
        (self.layer_grid[k + 1] - self.layer_grid[k]) / self.steps_per_layer as f64
    }

    fn node_time(&self, node: usize) -> f64 {
        if node == self.steps() {
            return 1.0;
        }
        let k = self.layer_of_step(node);
        let offset = node - k * self.steps_per_layer;
        self.layer_grid[k] + offset as f64 * self.step_size(node)
    }
}

fn fingerprint(path: &ParameterPath, data: &DataMeasure) -> u64 {
    let mut h = DefaultHasher::new();
    for v in path.layer_grid() {
        v.to_bits().hash(&mut h);
    }
    for layer in path.layers() {
        for v in layer.flat_points().iter().chain(layer.weights()) {
            v.to_bits().hash(&mut h);
        }
    }
    for i in 0..data.len() {
        for v in data.x(i).iter().chain(data.y(i)) {
            v.to_bits().hash(&mut h);
        }
        data.weights()[i].to_bits().hash(&mut h);
    }
    h.finish()
}

/// States of every sample at every RK4 node, plus the four stage inputs of
/// each step (needed by the adjoint and the linearized flow).
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    d: usize,
    samples: usize,
    grid: TimeGrid,
    // [sample][node][d]
    states: Vec<f64>,
    // [sample][step][stage][d]
    stages: Vec<f64>,
    fingerprint: u64,
}

impl ForwardTrace {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn steps_per_layer(&self) -> usize {
        self.grid.steps_per_layer
    }

    /// `L·S + 1`.
    pub fn node_count(&self) -> usize {
        self.grid.steps() + 1
    }

    pub fn node_time(&self, node: usize) -> f64 {
        self.grid.node_time(node)
    }

    /// Node index of the layer boundary `t_k`.
    pub fn layer_node(&self, k: usize) -> usize {
        k * self.grid.steps_per_layer
    }

    pub fn state(&self, sample: usize, node: usize) -> &[f64] {
        let idx = (sample * self.node_count() + node) * self.d;
        &self.states[idx..idx + self.d]
    }

    pub fn final_state(&self, sample: usize) -> &[f64] {
        self.state(sample, self.node_count() - 1)
    }

    pub(crate) fn stage(&self, sample: usize, step: usize, q: usize) -> &[f64] {
        let idx = ((sample * self.grid.steps() + step) * 4 + q) * self.d;
        &self.stages[idx..idx + self.d]
    }

    /// Largest state norm over every sample and node.
    pub fn max_state_norm(&self) -> f64 {
        self.states.chunks_exact(self.d).map(norm_sq).fold(0.0, f64::max).sqrt()
    }

    fn check_owner(&self, path: &ParameterPath, data: &DataMeasure) -> Result<()> {
        if self.fingerprint != fingerprint(path, data) || self.samples != data.len() {
            return Err(Error::TraceMismatch("path or data changed since the forward pass".into()));
        }
        Ok(())
    }
}

/// Gronwall envelope `(|x| + K t)·e^{K t}` with `K = C·max_k Σ_j w_j |θ_j|^p`.
pub fn gronwall_bound(model: &VectorFieldModel, path: &ParameterPath, x_norm: f64, t: f64) -> f64 {
    let cert = model.certificate();
    let k = path
        .layers()
        .iter()
        .map(|l| l.points().zip(l.weights()).map(|(p, w)| w * norm_sq(p).sqrt().powf(cert.p)).sum::<f64>())
        .fold(0.0, f64::max)
        * cert.c;
    (x_norm + k * t) * (k * t).exp()
}

fn check_dims(model: &VectorFieldModel, path: &ParameterPath, data: &DataMeasure) -> Result<()> {
    if path.particle_dim() != model.m() {
        return Err(Error::DimensionMismatch { expected: model.m(), got: path.particle_dim() });
    }
    if data.dim() != model.d() {
        return Err(Error::DimensionMismatch { expected: model.d(), got: data.dim() });
    }
    Ok(())
}

/// One RK4 step; writes the four stage inputs into `stages` and the new
/// state into `x`.
fn rk4_step(field: &LayerField<'_>, h: f64, x: &mut [f64], stages: &mut [f64], scratch: &mut [f64]) {
    let d = x.len();
    let (k, tmp) = scratch.split_at_mut(4 * d);
    stages[..d].copy_from_slice(x);
    field.eval(&stages[..d], &mut k[..d]);
    for (q, c) in [(1usize, 0.5), (2, 0.5), (3, 1.0)] {
        for c_i in 0..d {
            tmp[c_i] = x[c_i] + c * h * k[(q - 1) * d + c_i];
        }
        stages[q * d..(q + 1) * d].copy_from_slice(&tmp[..d]);
        field.eval(&stages[q * d..(q + 1) * d], &mut k[q * d..(q + 1) * d]);
    }
    for c_i in 0..d {
        x[c_i] += h / 6.0 * (k[c_i] + 2.0 * k[d + c_i] + 2.0 * k[2 * d + c_i] + k[3 * d + c_i]);
    }
}

/// Integrates every data sample through the path with `steps_per_layer`
/// RK4 steps per layer.
pub fn integrate_forward(
    model: &VectorFieldModel,
    path: &ParameterPath,
    data: &DataMeasure,
    steps_per_layer: usize,
) -> Result<ForwardTrace> {
    if steps_per_layer == 0 {
        return Err(Error::InvalidArgument("steps_per_layer must be at least 1".into()));
    }
    check_dims(model, path, data)?;
    let d = model.d();
    let grid = TimeGrid { layer_grid: path.layer_grid().to_vec(), steps_per_layer };
    let steps = grid.steps();
    let nodes = steps + 1;
    let fields: Vec<LayerField<'_>> = path.layers().iter().map(|l| LayerField::new(model, l)).collect();

    type SampleRun = std::result::Result<(Vec<f64>, Vec<f64>), usize>;
    let per_sample: Vec<SampleRun> = (0..data.len())
        .into_par_iter()
        .with_min_len(PAR_CHUNK)
        .map(|i| {
            let mut states = vec![0.0; nodes * d];
            let mut stages = vec![0.0; steps * 4 * d];
            let mut scratch = vec![0.0; 5 * d];
            let mut x = data.x(i).to_vec();
            states[..d].copy_from_slice(&x);
            for s in 0..steps {
                let field = &fields[grid.layer_of_step(s)];
                rk4_step(field, grid.step_size(s), &mut x, &mut stages[s * 4 * d..(s + 1) * 4 * d], &mut scratch);
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(s + 1);
                }
                states[(s + 1) * d..(s + 2) * d].copy_from_slice(&x);
            }
            Ok((states, stages))
        })
        .collect();

    let mut states = Vec::with_capacity(data.len() * nodes * d);
    let mut stages = Vec::with_capacity(data.len() * steps * 4 * d);
    let mut first_bad: Option<(usize, usize)> = None;
    for (i, r) in per_sample.into_iter().enumerate() {
        match r {
            Ok((st, sg)) => {
                states.extend(st);
                stages.extend(sg);
            }
            Err(node) => {
                if first_bad.is_none_or(|(n, _)| node < n) {
                    first_bad = Some((node, i));
                }
            }
        }
    }
    if let Some((node, sample)) = first_bad {
        return Err(Error::NonFiniteState { node, sample });
    }
    Ok(ForwardTrace { d, samples: data.len(), grid, states, stages, fingerprint: fingerprint(path, data) })
}

/// Flow map `X_{t_a, t_b}(x)` between two RK4 nodes on the path's grid.
pub fn flow_map(
    model: &VectorFieldModel,
    path: &ParameterPath,
    steps_per_layer: usize,
    x: &[f64],
    node_a: usize,
    node_b: usize,
) -> Result<Vec<f64>> {
    if x.len() != model.d() {
        return Err(Error::DimensionMismatch { expected: model.d(), got: x.len() });
    }
    let grid = TimeGrid { layer_grid: path.layer_grid().to_vec(), steps_per_layer };
    if node_a > node_b || node_b > grid.steps() {
        return Err(Error::InvalidArgument(format!("bad node interval [{node_a}, {node_b}]")));
    }
    let fields: Vec<LayerField<'_>> = path.layers().iter().map(|l| LayerField::new(model, l)).collect();
    let d = model.d();
    let mut x = x.to_vec();
    let mut stages = vec![0.0; 4 * d];
    let mut scratch = vec![0.0; 5 * d];
    for s in node_a..node_b {
        rk4_step(&fields[grid.layer_of_step(s)], grid.step_size(s), &mut x, &mut stages, &mut scratch);
    }
    Ok(x)
}

/// `(X_{t_k}(x_i), y_i)_# μ₀` as a measure on `ℝᵈ × ℝᵈ`.
pub fn push_forward(trace: &ForwardTrace, data: &DataMeasure, node: usize) -> Result<DiscreteMeasure> {
    if node >= trace.node_count() {
        return Err(Error::InvalidArgument(format!("node {node} out of range")));
    }
    if data.len() != trace.samples() {
        return Err(Error::TraceMismatch("sample count differs".into()));
    }
    let d = trace.dim();
    let mut points = Vec::with_capacity(2 * d * data.len());
    for i in 0..data.len() {
        points.extend_from_slice(trace.state(i, node));
        points.extend_from_slice(data.y(i));
    }
    DiscreteMeasure::from_flat(2 * d, points, data.weights().to_vec())
}

/// Costates `p_t(x_i) = ∂ℓ(X_1(x_i), y_i)/∂X_t(x_i)` at every node, and the
/// adjoint weights of each RK4 stage.
#[derive(Debug, Clone)]
pub struct CostateTrace {
    d: usize,
    nodes: usize,
    steps: usize,
    // [sample][node][d]
    costates: Vec<f64>,
    // [sample][step][stage][d]: the adjoint of each stage derivative k_q.
    stage_adjoints: Vec<f64>,
}

impl CostateTrace {
    pub fn costate(&self, sample: usize, node: usize) -> &[f64] {
        let idx = (sample * self.nodes + node) * self.d;
        &self.costates[idx..idx + self.d]
    }

    pub(crate) fn stage_adjoint(&self, sample: usize, step: usize, q: usize) -> &[f64] {
        let idx = ((sample * self.steps + step) * 4 + q) * self.d;
        &self.stage_adjoints[idx..idx + self.d]
    }
}

/// Reverse sweep through the recorded RK4 stages.
pub fn integrate_costate(
    model: &VectorFieldModel,
    loss: &LossModel,
    path: &ParameterPath,
    data: &DataMeasure,
    trace: &ForwardTrace,
) -> Result<CostateTrace> {
    trace.check_owner(path, data)?;
    let d = trace.d;
    let grid = &trace.grid;
    let steps = grid.steps();
    let nodes = steps + 1;
    let fields: Vec<LayerField<'_>> = path.layers().iter().map(|l| LayerField::new(model, l)).collect();

    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..data.len())
        .into_par_iter()
        .with_min_len(PAR_CHUNK)
        .map(|i| {
            let mut costates = vec![0.0; nodes * d];
            let mut adj = vec![0.0; steps * 4 * d];
            let mut p = loss.grad(trace.final_state(i), data.y(i));
            costates[steps * d..].copy_from_slice(&p);
            let mut zbar = vec![0.0; d];
            for s in (0..steps).rev() {
                let h = grid.step_size(s);
                let field = &fields[grid.layer_of_step(s)];
                let kb = &mut adj[s * 4 * d..(s + 1) * 4 * d];
                for c in 0..d {
                    kb[c] = h / 6.0 * p[c];
                    kb[d + c] = h / 3.0 * p[c];
                    kb[2 * d + c] = h / 3.0 * p[c];
                    kb[3 * d + c] = h / 6.0 * p[c];
                }
                let mut next = p.clone();
                // Stage q feeds stage q+1 through z_{q+1} = x + c_q h k_q.
                for (q, feed) in [(3usize, 1.0), (2, 0.5), (1, 0.5), (0, 0.0)] {
                    zbar.iter_mut().for_each(|v| *v = 0.0);
                    field.add_vjp_x(trace.stage(i, s, q), &kb[q * d..(q + 1) * d], &mut zbar);
                    if q > 0 {
                        for c in 0..d {
                            kb[(q - 1) * d + c] += feed * h * zbar[c];
                        }
                    }
                    next.iter_mut().zip(&zbar).for_each(|(n, z)| *n += z);
                }
                p = next;
                costates[s * d..(s + 1) * d].copy_from_slice(&p);
            }
            (costates, adj)
        })
        .collect();

    let mut costates = Vec::with_capacity(data.len() * nodes * d);
    let mut stage_adjoints = Vec::with_capacity(data.len() * steps * 4 * d);
    for (c, a) in per_sample {
        costates.extend(c);
        stage_adjoints.extend(a);
    }
    Ok(CostateTrace { d, nodes, steps, costates, stage_adjoints })
}

/// `M(x_i; t_a, t_b) = ∂X_{t_b}/∂X_{t_a}` along sample `i`, by RK4 on
/// `Ṁ = ∂ₓv̄(X_t)·M` using the recorded stage states.
pub fn fundamental_matrix(
    model: &VectorFieldModel,
    path: &ParameterPath,
    data: &DataMeasure,
    trace: &ForwardTrace,
    sample: usize,
    node_a: usize,
    node_b: usize,
) -> Result<DMatrix<f64>> {
    trace.check_owner(path, data)?;
    if sample >= trace.samples || node_a > node_b || node_b >= trace.node_count() {
        return Err(Error::InvalidArgument(format!("sample {sample}, nodes [{node_a}, {node_b}]")));
    }
    let d = trace.d;
    let fields: Vec<LayerField<'_>> = path.layers().iter().map(|l| LayerField::new(model, l)).collect();
    let mut m = DMatrix::<f64>::identity(d, d);
    let mut jbuf = vec![0.0; d * d];
    for s in node_a..node_b {
        let h = trace.grid.step_size(s);
        let field = &fields[trace.grid.layer_of_step(s)];
        let mut jac = |q: usize| {
            field.jac_x(trace.stage(sample, s, q), &mut jbuf);
            DMatrix::from_row_slice(d, d, &jbuf)
        };
        let k1 = jac(0) * &m;
        let k2 = jac(1) * (&m + &k1 * (0.5 * h));
        let k3 = jac(2) * (&m + &k2 * (0.5 * h));
        let k4 = jac(3) * (&m + &k3 * h);
        m += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    Ok(m)
}
