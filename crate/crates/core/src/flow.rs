//! Explicit Euler integration of the particle flow `θ̇ = −G[η](t, θ)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::measures::{dirichlet_energy, support_radius, DiscreteMeasure, ParameterPath};
use crate::objective::{GradientField, ObjectiveReport, Problem};

pub const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub dtau: f64,
    pub tau_max: f64,
    pub stop_slope: f64,
    /// Record every this many steps (the last state is always recorded).
    pub record_every: usize,
    /// Keep a path snapshot every this many records; `0` keeps only the last.
    pub snapshot_every: usize,
    /// Shrink factor for backtracking; `None` runs at fixed step.
    pub backtracking: Option<f64>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { dtau: 1e-2, tau_max: 100.0, stop_slope: 1e-8, record_every: 1, snapshot_every: 0, backtracking: None }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dtau > 0.0) || !self.dtau.is_finite() {
            return Err(Error::InvalidArgument(format!("dtau must be positive, got {}", self.dtau)));
        }
        if !(self.stop_slope >= 0.0) {
            return Err(Error::InvalidArgument("stop_slope must be nonnegative".into()));
        }
        if !(self.tau_max >= 0.0) {
            return Err(Error::InvalidArgument("tau_max must be nonnegative".into()));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidArgument("record_every must be at least 1".into()));
        }
        if let Some(s) = self.backtracking {
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::InvalidArgument("backtracking shrink must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub j_before: f64,
    /// Only evaluated when backtracking is on.
    pub j_after: Option<f64>,
    pub slope: f64,
    pub step_size: f64,
    pub halvings: usize,
}

fn euler_update(path: &ParameterPath, gradient: &GradientField, dtau: f64) -> Result<ParameterPath> {
    let mut next = path.clone();
    next.map_particles(|k, j, theta| {
        theta.iter_mut().zip(gradient.get(k, j)).for_each(|(t, g)| *t -= dtau * g);
    })?;
    Ok(next)
}

fn step_from(
    problem: &Problem,
    path: &ParameterPath,
    gradient: &GradientField,
    report: &ObjectiveReport,
    dtau: f64,
    backtracking: Option<f64>,
) -> Result<(ParameterPath, StepReport)> {
    let slope = report.slope.unwrap_or(f64::NAN);
    let Some(shrink) = backtracking else {
        let next = euler_update(path, gradient, dtau)?;
        return Ok((next, StepReport { j_before: report.j, j_after: None, slope, step_size: dtau, halvings: 0 }));
    };
    let mut size = dtau;
    for halvings in 0..=MAX_HALVINGS {
        // A blow-up during the trial counts as an increase.
        let trial = euler_update(path, gradient, size)
            .and_then(|next| problem.eval_objective(&next).map(|r| (next, r.j)));
        if let Ok((next, j)) = trial {
            if j <= report.j {
                return Ok((next, StepReport { j_before: report.j, j_after: Some(j), slope, step_size: size, halvings }));
            }
        }
        size *= shrink;
    }
    Err(Error::StepFailure(MAX_HALVINGS))
}

/// One explicit Euler step `θ ← θ − dτ·G` on every particle.
pub fn flow_step(problem: &Problem, path: &ParameterPath, cfg: &FlowConfig) -> Result<(ParameterPath, StepReport)> {
    cfg.validate()?;
    let (gradient, report) = problem.wasserstein_gradient(path)?;
    step_from(problem, path, &gradient, &report, cfg.dtau, cfg.backtracking)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowRecord {
    pub tau: f64,
    pub j: f64,
    pub loss: f64,
    pub regularizer: f64,
    pub slope: f64,
    pub support_radius: f64,
    /// `NaN` for single-layer paths.
    pub dirichlet: f64,
    /// Step taken from this state; `0` for the last record.
    pub step_size: f64,
    /// A step at the nominal size was taken from this state.
    pub accepted: bool,
    /// `max |G[k][j]|` at this state.
    pub grad_inf: f64,
    /// `∫₀^τ |η'|²`, accumulated at step resolution.
    pub speed_sq_integral: f64,
    /// `∫₀^τ slope²` by per-step trapezoids.
    pub slope_sq_integral: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    SlopeBelowThreshold,
    HorizonReached,
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub record: usize,
    pub tau: f64,
    pub path: ParameterPath,
}

#[derive(Debug, Clone)]
pub struct FlowTrace {
    pub records: Vec<FlowRecord>,
    pub snapshots: Vec<Snapshot>,
    pub stop: StopReason,
    pub steps: usize,
}

impl FlowTrace {
    pub fn final_path(&self) -> &ParameterPath {
        &self.snapshots.last().expect("final snapshot is always kept").path
    }

    pub fn last(&self) -> &FlowRecord {
        self.records.last().expect("trace has at least one record")
    }
}

fn record_of(tau: f64, path: &ParameterPath, report: &ObjectiveReport, gradient: &GradientField, acc: (f64, f64)) -> FlowRecord {
    FlowRecord {
        tau,
        j: report.j,
        loss: report.loss,
        regularizer: report.regularizer,
        slope: report.slope.unwrap_or(f64::NAN),
        support_radius: support_radius(path),
        dirichlet: dirichlet_energy(path).unwrap_or(f64::NAN),
        step_size: 0.0,
        accepted: false,
        grad_inf: gradient.inf_norm(),
        speed_sq_integral: acc.0,
        slope_sq_integral: acc.1,
    }
}

/// Iterates [`flow_step`] until the slope drops below `stop_slope` or `τ`
/// reaches `tau_max`.
pub fn run_flow(problem: &Problem, path0: &ParameterPath, cfg: &FlowConfig) -> Result<FlowTrace> {
    run_flow_with(problem, path0, cfg, |_| {})
}

/// [`run_flow`] with a callback on every appended record.
pub fn run_flow_with(
    problem: &Problem,
    path0: &ParameterPath,
    cfg: &FlowConfig,
    mut on_record: impl FnMut(&FlowRecord),
) -> Result<FlowTrace> {
    cfg.validate()?;
    let mut path = path0.clone();
    let mut tau = 0.0;
    let mut step = 0usize;
    let mut records: Vec<FlowRecord> = Vec::new();
    let mut snapshots = Vec::new();
    // Pending record is emitted once its step size is known.
    let mut pending: Option<FlowRecord> = None;
    let horizon_eps = 1e-9 * cfg.dtau;
    // Running energy integrals and the (slope, step) of the previous step.
    let mut acc = (0.0, 0.0);
    let mut prev: Option<(f64, f64)> = None;
    loop {
        let (gradient, report) = problem.wasserstein_gradient(&path)?;
        let slope = report.slope.unwrap_or(f64::NAN);
        if let Some((s0, h)) = prev {
            // The particles move with speed |G| = s0 over the whole step.
            acc.0 += h * s0 * s0;
            acc.1 += 0.5 * h * (s0 * s0 + slope * slope);
        }
        let stop = if slope < cfg.stop_slope {
            Some(StopReason::SlopeBelowThreshold)
        } else if tau >= cfg.tau_max - horizon_eps {
            Some(StopReason::HorizonReached)
        } else {
            None
        };
        if let Some(reason) = stop {
            let rec = record_of(tau, &path, &report, &gradient, acc);
            on_record(&rec);
            records.push(rec);
            snapshots.push(Snapshot { record: records.len() - 1, tau, path });
            return Ok(FlowTrace { records, snapshots, stop: reason, steps: step });
        }
        if step.is_multiple_of(cfg.record_every) {
            pending = Some(record_of(tau, &path, &report, &gradient, acc));
        }
        let remaining = cfg.tau_max - tau;
        let dtau = cfg.dtau.min(remaining);
        let (next, info) = step_from(problem, &path, &gradient, &report, dtau, cfg.backtracking)?;
        if let Some(mut rec) = pending.take() {
            rec.step_size = info.step_size;
            rec.accepted = info.halvings == 0;
            on_record(&rec);
            records.push(rec);
            if cfg.snapshot_every > 0 && (records.len() - 1).is_multiple_of(cfg.snapshot_every) {
                snapshots.push(Snapshot { record: records.len() - 1, tau, path: path.clone() });
            }
        }
        prev = Some((slope, info.step_size));
        path = next;
        step += 1;
        tau = if cfg.backtracking.is_none() && dtau == cfg.dtau { step as f64 * cfg.dtau } else { tau + info.step_size };
    }
}

/// Energy balance between the first and last of `records`.
///
/// `dissipated` is `½∫|η'|² + ½∫slope²`; a curve of maximal slope satisfies
/// `J(τ₀) − J(τ₁) = dissipated`, and the Euler polygon does so up to
/// `O(dτ²)`. `slope_sq_integral` alone balances the energy only up to
/// `O(dτ)`. Both integrals are accumulated at step resolution, so sparse
/// recording does not degrade them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DissipationReport {
    pub energy_drop: f64,
    pub dissipated: f64,
    /// `|drop − dissipated| / drop`, or `0` when both vanish.
    pub relative_mismatch: f64,
    pub slope_sq_integral: f64,
    pub slope_sq_mismatch: f64,
}

pub fn dissipation_check(trace: &FlowTrace) -> Result<DissipationReport> {
    dissipation_between(&trace.records)
}

pub fn dissipation_between(records: &[FlowRecord]) -> Result<DissipationReport> {
    if records.len() < 2 {
        return Err(Error::InsufficientData("dissipation check needs two records".into()));
    }
    let (first, last) = (&records[0], &records[records.len() - 1]);
    let energy_drop = first.j - last.j;
    let speed_sq = last.speed_sq_integral - first.speed_sq_integral;
    let slope_sq = last.slope_sq_integral - first.slope_sq_integral;
    let dissipated = 0.5 * (speed_sq + slope_sq);
    let rel = |v: f64| {
        let gap = (energy_drop - v).abs();
        if gap == 0.0 {
            0.0
        } else {
            gap / energy_drop.abs()
        }
    };
    Ok(DissipationReport {
        energy_drop,
        dissipated,
        relative_mismatch: rel(dissipated),
        slope_sq_integral: slope_sq,
        slope_sq_mismatch: rel(slope_sq),
    })
}

/// I.i.d. Gaussian particles of standard deviation `scale`, then each
/// particle index averaged over layers within `smoothing` of its own.
pub fn init_path(layers: usize, particles: usize, m: usize, scale: f64, smoothing: usize, seed: u64) -> Result<ParameterPath> {
    if layers == 0 || particles == 0 || m == 0 {
        return Err(Error::InvalidArgument("layers, particles and m must be positive".into()));
    }
    let normal = Normal::new(0.0, scale).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<Vec<f64>> = (0..layers).map(|_| (0..particles * m).map(|_| normal.sample(&mut rng)).collect()).collect();
    let smoothed = (0..layers).map(|k| {
        let lo = k.saturating_sub(smoothing);
        let hi = (k + smoothing).min(layers - 1);
        let count = (hi - lo + 1) as f64;
        let mut acc = vec![0.0; particles * m];
        for layer in &raw[lo..=hi] {
            acc.iter_mut().zip(layer).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= count);
        DiscreteMeasure::uniform_flat(m, acc)
    });
    ParameterPath::uniform(smoothed.collect::<Result<Vec<_>>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{second_moment, DataMeasure};
    use crate::model::{LossModel, VectorFieldModel};

    fn regularizer_only(lambda: f64) -> Problem {
        Problem::new(VectorFieldModel::linear_tanh(1), LossModel::squared_error(1.0), DataMeasure::empty(1), lambda, 2).unwrap()
    }

    #[test]
    fn pure_regularizer_step_is_scalar_recursion() {
        let problem = regularizer_only(0.5);
        let path = init_path(3, 4, 2, 1.0, 0, 3).unwrap();
        let cfg = FlowConfig { dtau: 0.1, ..Default::default() };
        let (next, info) = flow_step(&problem, &path, &cfg).unwrap();
        assert_eq!(info.step_size, 0.1);
        for k in 0..3 {
            for j in 0..4 {
                for (a, b) in next.particle(k, j).iter().zip(path.particle(k, j)) {
                    assert!((a - b * (1.0 - 0.05)).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn critical_point_stops_immediately() {
        let problem = regularizer_only(1.0);
        let path = init_path(2, 3, 2, 0.0, 0, 0).unwrap();
        let trace = run_flow(&problem, &path, &FlowConfig { stop_slope: 1e-12, ..Default::default() }).unwrap();
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.stop, StopReason::SlopeBelowThreshold);
        assert_eq!(trace.last().slope, 0.0);
    }

    #[test]
    fn zero_horizon_gives_single_record() {
        let problem = regularizer_only(1.0);
        let path = init_path(2, 3, 2, 1.0, 1, 9).unwrap();
        let trace = run_flow(&problem, &path, &FlowConfig { tau_max: 0.0, ..Default::default() }).unwrap();
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.stop, StopReason::HorizonReached);
        assert_eq!(trace.final_path(), &path);
    }

    #[test]
    fn regularizer_flow_decays_exponentially() {
        let lambda = 0.7;
        let problem = regularizer_only(lambda);
        let path = init_path(2, 5, 2, 1.0, 0, 1).unwrap();
        let m2 = second_moment(&path);
        let cfg = FlowConfig { dtau: 1e-3, tau_max: 2.0, stop_slope: 0.0, record_every: 100, ..Default::default() };
        let trace = run_flow(&problem, &path, &cfg).unwrap();
        for r in &trace.records {
            let exact = 0.5 * lambda * m2 * (-2.0 * lambda * r.tau).exp();
            assert!((r.j - exact).abs() / exact < 2e-3, "tau {} j {} exact {}", r.tau, r.j, exact);
        }
        let diss = dissipation_check(&trace).unwrap();
        assert!(diss.relative_mismatch < 0.02, "{diss:?}");
    }

    #[test]
    fn constant_trace_has_zero_mismatch() {
        let rec = FlowRecord {
            tau: 0.0,
            j: 1.0,
            loss: 1.0,
            regularizer: 0.0,
            slope: 0.0,
            support_radius: 0.0,
            dirichlet: 0.0,
            step_size: 0.1,
            accepted: true,
            grad_inf: 0.0,
            speed_sq_integral: 0.0,
            slope_sq_integral: 0.0,
        };
        let recs = [rec, FlowRecord { tau: 1.0, ..rec }];
        let report = dissipation_between(&recs).unwrap();
        assert_eq!((report.energy_drop, report.dissipated, report.relative_mismatch), (0.0, 0.0, 0.0));
        assert!(dissipation_between(&recs[..1]).is_err());
    }

    #[test]
    fn smoothing_averages_layers() {
        let raw = init_path(3, 1, 1, 1.0, 0, 5).unwrap();
        let smooth = init_path(3, 1, 1, 1.0, 1, 5).unwrap();
        let v: Vec<f64> = (0..3).map(|k| raw.particle(k, 0)[0]).collect();
        assert!((smooth.particle(0, 0)[0] - (v[0] + v[1]) / 2.0).abs() < 1e-15);
        assert!((smooth.particle(1, 0)[0] - (v[0] + v[1] + v[2]) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(FlowConfig { dtau: 0.0, ..Default::default() }.validate().is_err());
        assert!(FlowConfig { backtracking: Some(1.5), ..Default::default() }.validate().is_err());
        assert!(FlowConfig { record_every: 0, ..Default::default() }.validate().is_err());
    }
}
